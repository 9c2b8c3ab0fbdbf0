//! Cross-similarity learning between anchor and positive token groups, and
//! the visual prediction head.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{prepend_token, uniform_tensor, Ctx, LayerNorm, Linear, Mlp, TransformerEncoder};
use crate::rng::Rng;
use crate::lgae::TOKEN_INIT;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Euclidean distances `d[r][c] = ‖q2[r] − k1[c]‖` per sample:
/// `(B, N, d) × (B, M, d) → (B, N, M)`.
pub fn pairwise_euclidean(ctx: &mut Ctx, q2: Var, k1: Var) -> Result<Var> {
    ctx.pairwise_distance(q2, k1)
}

/// `max(D) + min(D) − D`, extremes taken over each sample's whole matrix.
pub fn minmax_shift(ctx: &mut Ctx, d: Var) -> Result<Var> {
    let s = ctx.shape(d).to_vec();
    let (b, n, m) = (s[0], s[1], s[2]);
    let flat = ctx.reshape(d, &[b, n * m])?;
    let hi = ctx.max_axis(flat, 1, true)?;
    let lo = ctx.min_axis(flat, 1, true)?;
    let span = ctx.add(hi, lo)?;
    let span = ctx.reshape(span, &[b, 1, 1])?;
    let neg = ctx.scale(d, -1.0);
    ctx.add(neg, span)
}

/// Token weights from a shifted similarity `s: (B, N, M)` with rows indexed
/// by positive tokens and columns by anchor tokens.
///
/// `alpha1 (B, M)`: softmax over anchor tokens of the column sums of the
/// row-L1-normalised `s`. `alpha2 (B, N)`: softmax over positive tokens of
/// the row sums of the column-L1-normalised `s`.
pub fn cross_attention_weights(ctx: &mut Ctx, s: Var) -> Result<(Var, Var)> {
    let row_l1 = l1_norm(ctx, s, -1)?;
    let col_l1 = l1_norm(ctx, s, -2)?;
    for n in [row_l1, col_l1] {
        if ctx.value(n).data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::ZeroRow);
        }
    }
    let by_row = ctx.div(s, row_l1)?;
    let by_col = ctx.div(s, col_l1)?;
    let agg1 = ctx.sum_axis(by_row, -2, false)?;
    let agg2 = ctx.sum_axis(by_col, -1, false)?;
    Ok((ctx.softmax(agg1, -1)?, ctx.softmax(agg2, -1)?))
}

fn l1_norm(ctx: &mut Ctx, s: Var, axis: isize) -> Result<Var> {
    // every entry of a shifted similarity is non-negative
    ctx.sum_axis(s, axis, true)
}

/// Cross-similarity block of one scale.
#[derive(Clone, Debug)]
pub struct CslScale {
    pub norm: LayerNorm,
    /// Shared by anchor and positive; emits `2·d_e` channels.
    pub phi: Linear,
    /// `d_e → d_model`, present when the widths differ.
    pub back: Option<Linear>,
    pub out_norm: LayerNorm,
    pub mlp: Mlp,
    pub embed_dim: usize,
}

/// Everything computed for one scale of one pair batch.
#[derive(Clone, Copy, Debug)]
pub struct CslPairState {
    pub k1: Var,
    pub v1: Var,
    pub q2: Var,
    pub v2: Var,
    pub d_mat: Var,
    pub s_shift: Var,
    pub alpha1: Var,
    pub alpha2: Var,
}

impl CslScale {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, embed_dim: usize) -> Result<Self> {
        let back = if embed_dim != d_model {
            Some(Linear::new(store, rng, &format!("{name}.back"), embed_dim, d_model)?)
        } else {
            None
        };
        Ok(CslScale {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d_model)?,
            phi: Linear::build(store, rng, &format!("{name}.phi"), d_model, 2 * embed_dim, false, false)?,
            back,
            out_norm: LayerNorm::new(store, &format!("{name}.out_ln"), d_model)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d_model, 4 * d_model)?,
            embed_dim,
        })
    }

    /// `LN` then the shared projection, split into its two halves.
    pub fn project(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.phi.forward(ctx, h)?;
        let first = ctx.slice(h, -1, 0, self.embed_dim)?;
        let second = ctx.slice(h, -1, self.embed_dim, self.embed_dim)?;
        Ok((first, second))
    }

    pub fn pair_state(&self, ctx: &mut Ctx, anchor: Var, positive: Var) -> Result<CslPairState> {
        let (k1, v1) = self.project(ctx, anchor)?;
        let (q2, v2) = self.project(ctx, positive)?;
        let d_mat = pairwise_euclidean(ctx, q2, k1)?;
        let s_shift = minmax_shift(ctx, d_mat)?;
        let (alpha1, alpha2) = match cross_attention_weights(ctx, s_shift) {
            Ok(w) => w,
            Err(Error::ZeroRow) => per_sample_weights(ctx, s_shift)?,
            Err(e) => return Err(e),
        };
        Ok(CslPairState {
            k1,
            v1,
            q2,
            v2,
            d_mat,
            s_shift,
            alpha1,
            alpha2,
        })
    }

    /// `MLP(LN(x + α ⊙ back(v)))`.
    fn update(&self, ctx: &mut Ctx, x: Var, alpha: Var, v: Var) -> Result<Var> {
        let v = match &self.back {
            Some(lin) => lin.forward(ctx, v)?,
            None => v,
        };
        let s = ctx.shape(alpha).to_vec();
        let a = ctx.reshape(alpha, &[s[0], s[1], 1])?;
        let weighted = ctx.mul(a, v)?;
        let h = ctx.add(x, weighted)?;
        let h = self.out_norm.forward(ctx, h)?;
        self.mlp.forward(ctx, h)
    }

    /// Enhanced anchor and positive groups, same shapes as the inputs.
    pub fn forward(&self, ctx: &mut Ctx, anchor: Var, positive: Var) -> Result<(Var, Var, CslPairState)> {
        let sa = ctx.shape(anchor).to_vec();
        if sa != ctx.shape(positive) {
            return Err(Error::shape("cross similarity groups", &sa, ctx.shape(positive)));
        }
        let st = self.pair_state(ctx, anchor, positive)?;
        let a = self.update(ctx, anchor, st.alpha1, st.v1)?;
        let p = self.update(ctx, positive, st.alpha2, st.v2)?;
        Ok((a, p, st))
    }
}

/// Weights computed sample by sample; a sample whose similarity has an
/// all-zero row or column gets uniform weights.
fn per_sample_weights(ctx: &mut Ctx, s: Var) -> Result<(Var, Var)> {
    let shape = ctx.shape(s).to_vec();
    let (b, n, m) = (shape[0], shape[1], shape[2]);
    let (mut a1, mut a2) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for i in 0..b {
        let si = ctx.slice(s, 0, i, 1)?;
        match cross_attention_weights(ctx, si) {
            Ok((x, y)) => {
                a1.push(x);
                a2.push(y);
            }
            Err(Error::ZeroRow) => {
                a1.push(ctx.constant(Tensor::full(&[1, m], 1.0 / m as f64)));
                a2.push(ctx.constant(Tensor::full(&[1, n], 1.0 / n as f64)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((ctx.concat(&a1, 0)?, ctx.concat(&a2, 0)?))
}

/// Per-scale cross similarity followed by the visual transformer head.
#[derive(Clone, Debug)]
pub struct Csl {
    pub scales: Vec<CslScale>,
    pub head_cls: ParamId,
    pub head: TransformerEncoder,
    pub classifier: Linear,
}

impl Csl {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Result<Self> {
        let scales = (0..cfg.scale_dims.len())
            .map(|i| CslScale::new(store, rng, &format!("csl.s{}", i + 1), cfg.d_model, cfg.csl_dim))
            .collect::<Result<_>>()?;
        let head_cls = store.add("csl.head.cls", uniform_tensor(rng, &[cfg.d_model], TOKEN_INIT), false)?;
        let head = TransformerEncoder::new(store, rng, "csl.head", cfg.d_model, cfg.head_depth, cfg.heads)?;
        let classifier = Linear::new(store, rng, "csl.classifier", cfg.d_model, cfg.num_classes())?;
        Ok(Csl {
            scales,
            head_cls,
            head,
            classifier,
        })
    }

    /// Splits both token sequences into scale groups, enhances each pair and
    /// returns the enhanced groups. States are recorded as
    /// `csl_s{i}.{dmat,alpha1,alpha2}`.
    pub fn enhance(
        &self,
        ctx: &mut Ctx,
        x_anchor: Var,
        x_positive: Var,
        group_sizes: &[usize],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let (mut out_a, mut out_p) = (Vec::new(), Vec::new());
        let mut start = 0;
        for (i, (&n, block)) in group_sizes.iter().zip(&self.scales).enumerate() {
            let xa = ctx.slice(x_anchor, 1, start, n)?;
            let xp = ctx.slice(x_positive, 1, start, n)?;
            let (a, p, st) = block.forward(ctx, xa, xp)?;
            ctx.record(format!("csl_s{}.dmat", i + 1), st.d_mat);
            ctx.record(format!("csl_s{}.alpha1", i + 1), st.alpha1);
            ctx.record(format!("csl_s{}.alpha2", i + 1), st.alpha2);
            out_a.push(a);
            out_p.push(p);
            start += n;
        }
        Ok((out_a, out_p))
    }

    /// Class logits `(B, C)` from enhanced groups.
    pub fn visual_logits(&self, ctx: &mut Ctx, groups: &[Var]) -> Result<Var> {
        let x = ctx.concat(groups, 1)?;
        let x = prepend_token(ctx, self.head_cls, x)?;
        let h = self.head.forward(ctx, x)?;
        let s = ctx.shape(h).to_vec();
        let c = ctx.slice(h, 1, 0, 1)?;
        let c = ctx.reshape(c, &[s[0], s[2]])?;
        self.classifier.forward(ctx, c)
    }

    /// Visual logits of the anchor and positive batches.
    pub fn forward(&self, ctx: &mut Ctx, x_anchor: Var, x_positive: Var, group_sizes: &[usize]) -> Result<(Var, Var)> {
        let (ga, gp) = self.enhance(ctx, x_anchor, x_positive, group_sizes)?;
        let ya = self.visual_logits(ctx, &ga)?;
        let yp = self.visual_logits(ctx, &gp)?;
        Ok((ya, yp))
    }
}
