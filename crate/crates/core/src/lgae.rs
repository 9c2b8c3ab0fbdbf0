//! Landmark-guided encoder: per-scale gated cross attention from appearance
//! queries to geometry keys/values, then multi-scale token fusion with a
//! transformer encoder.

use crate::config::{AblationFlags, GateSource, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{prepend_token, uniform_tensor, BatchNorm, Ctx, Linear, TransformerEncoder};
use crate::rng::Rng;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::Var;

/// Scale of the uniform initialisation of learned tokens and positions.
pub const TOKEN_INIT: f64 = 0.02;

/// Query, gate logits, key and value of one scale, heads split out:
/// `q, k, v: (B, H, N, d_h)`, `gate_logits: (B, H, N, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct BgcaProjections {
    pub q: Var,
    pub gate_logits: Option<Var>,
    pub k: Var,
    pub v: Var,
}

/// Attention maps of one scale, each `(B, H, N, N)` except `g: (B, H, N, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct BgcaAttentionState {
    pub s: Var,
    pub dense: Var,
    pub sparse: Option<Var>,
    pub g: Option<Var>,
    pub mixed: Var,
}

/// Row-wise softmax over the key axis.
pub fn dense_attention(ctx: &mut Ctx, s: Var) -> Result<Var> {
    ctx.softmax(s, -1)
}

/// `relu(s)² / (Σ_j relu(s)² + eps)` per query row.
pub fn sparse_attention(ctx: &mut Ctx, s: Var, eps: f64) -> Result<Var> {
    let r = ctx.relu_squared(s);
    let denom = ctx.sum_axis(r, -1, true)?;
    let denom = ctx.offset(denom, eps);
    ctx.div(r, denom)
}

/// `g = σ(gate_logits)`, `mixed = g⊙dense + (1−g)⊙sparse` with `g`
/// broadcast along each row.
pub fn gated_fusion(ctx: &mut Ctx, dense: Var, sparse: Var, gate_logits: Var) -> Result<(Var, Var)> {
    let g = ctx.sigmoid(gate_logits);
    let keep = ctx.mul(g, dense)?;
    let neg = ctx.scale(g, -1.0);
    let rest = ctx.offset(neg, 1.0);
    let other = ctx.mul(rest, sparse)?;
    Ok((g, ctx.add(keep, other)?))
}

/// `(B, N, H·d)` → `(B, H, N, d)`.
fn split_heads(ctx: &mut Ctx, x: Var, heads: usize) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let x = ctx.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    ctx.permute(x, &[0, 2, 1, 3])
}

/// Cross attention of one scale. Without a gate it is plain softmax
/// attention from appearance to geometry.
#[derive(Clone, Debug)]
pub struct Bgca {
    pub query: Linear,
    pub gate: Option<Linear>,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub norm: BatchNorm,
    pub heads: usize,
    pub head_dim: usize,
    pub gated: bool,
    pub shared_gate: bool,
    pub eps: f64,
}

impl Bgca {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        cfg: &ModelConfig,
        gated: bool,
    ) -> Result<Self> {
        let (h, dh) = (cfg.bgca_heads, cfg.bgca_head_dim);
        let shared_gate = gated && cfg.gate_source == GateSource::Shared;
        let q_out = h * dh + if shared_gate { h } else { 0 };
        let query = Linear::new(store, rng, &format!("{name}.q"), dim, q_out)?;
        let gate = if gated && !shared_gate {
            Some(Linear::new(store, rng, &format!("{name}.gate"), dim, h)?)
        } else {
            None
        };
        Ok(Bgca {
            query,
            gate,
            key: Linear::build(store, rng, &format!("{name}.k"), dim, h * dh, false, false)?,
            // softmax rows sum to one, so without the sparse branch a value
            // bias would only add a per-channel constant that the norm removes
            value: Linear::build(store, rng, &format!("{name}.v"), dim, h * dh, gated, false)?,
            proj: Linear::build(store, rng, &format!("{name}.proj"), h * dh, dim, false, false)?,
            norm: BatchNorm::new(store, &format!("{name}.bn"), dim)?,
            heads: h,
            head_dim: dh,
            gated,
            shared_gate,
            eps: cfg.bgca_eps,
        })
    }

    pub fn project(&self, ctx: &mut Ctx, f_ir: Var, f_face: Var) -> Result<BgcaProjections> {
        let (sa, sf) = (ctx.shape(f_ir).to_vec(), ctx.shape(f_face).to_vec());
        if sa.len() != 3 || sa[..2] != sf[..2] {
            return Err(Error::shape("cross attention tokens", &sa, &sf));
        }
        let (b, n) = (sa[0], sa[1]);
        let width = self.heads * self.head_dim;
        let qg = self.query.forward(ctx, f_ir)?;
        let (q, gate_raw) = if self.shared_gate {
            let q = ctx.slice(qg, -1, 0, width)?;
            (q, Some(ctx.slice(qg, -1, width, self.heads)?))
        } else {
            let g = match &self.gate {
                Some(lin) => Some(lin.forward(ctx, f_ir)?),
                None => None,
            };
            (qg, g)
        };
        let gate_logits = match gate_raw {
            Some(g) => {
                let g = ctx.permute(g, &[0, 2, 1])?;
                Some(ctx.reshape(g, &[b, self.heads, n, 1])?)
            }
            None => None,
        };
        let k = self.key.forward(ctx, f_face)?;
        let v = self.value.forward(ctx, f_face)?;
        Ok(BgcaProjections {
            q: split_heads(ctx, q, self.heads)?,
            gate_logits,
            k: split_heads(ctx, k, self.heads)?,
            v: split_heads(ctx, v, self.heads)?,
        })
    }

    pub fn attention(&self, ctx: &mut Ctx, p: &BgcaProjections) -> Result<BgcaAttentionState> {
        let kt = ctx.transpose(p.k)?;
        let s = ctx.matmul(p.q, kt)?;
        let s = ctx.scale(s, 1.0 / (self.head_dim as f64).sqrt());
        let dense = dense_attention(ctx, s)?;
        match p.gate_logits {
            Some(logits) => {
                let sparse = sparse_attention(ctx, s, self.eps)?;
                let (g, mixed) = gated_fusion(ctx, dense, sparse, logits)?;
                Ok(BgcaAttentionState {
                    s,
                    dense,
                    sparse: Some(sparse),
                    g: Some(g),
                    mixed,
                })
            }
            None => Ok(BgcaAttentionState {
                s,
                dense,
                sparse: None,
                g: None,
                mixed: dense,
            }),
        }
    }

    /// `BN(f_ir + proj(mixed · v))`, plus the attention maps.
    pub fn forward(&self, ctx: &mut Ctx, f_ir: Var, f_face: Var) -> Result<(Var, BgcaAttentionState)> {
        let p = self.project(ctx, f_ir, f_face)?;
        let st = self.attention(ctx, &p)?;
        let o = ctx.matmul(st.mixed, p.v)?;
        let s = ctx.shape(o).to_vec();
        let o = ctx.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.reshape(o, &[s[0], s[2], s[1] * s[3]])?;
        let o = self.proj.forward(ctx, o)?;
        let r = ctx.add(f_ir, o)?;
        Ok((self.norm.forward(ctx, r)?, st))
    }
}

/// Fused token sequence: `x: (B, ΣN_i, d_model)` ordered by scale, and the
/// class token `z_cls: (B, d_model)`.
#[derive(Clone, Debug)]
pub struct TokenBundle {
    pub x: Var,
    pub z_cls: Var,
    pub group_sizes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Lgae {
    /// Per-scale cross attention; absent without landmark guidance.
    pub fusion: Option<Vec<Bgca>>,
    pub to_model: Vec<Linear>,
    pub cls: ParamId,
    pub pos: ParamId,
    pub encoder: TransformerEncoder,
}

impl Lgae {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cfg: &ModelConfig,
        flags: AblationFlags,
        image_size: usize,
    ) -> Result<Self> {
        let fusion = if flags.landmark_guidance {
            Some(
                cfg.scale_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| Bgca::new(store, rng, &format!("lgae.bgca.s{}", i + 1), d, cfg, flags.bgca))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let to_model = cfg
            .scale_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, rng, &format!("lgae.fuse.s{}", i + 1), d, cfg.d_model))
            .collect::<Result<_>>()?;
        let tokens: usize = cfg.patch_sizes.iter().map(|p| (image_size / p).pow(2)).sum();
        let cls = store.add("lgae.cls", uniform_tensor(rng, &[cfg.d_model], TOKEN_INIT), false)?;
        let pos = store.add("lgae.pos", uniform_tensor(rng, &[tokens + 1, cfg.d_model], TOKEN_INIT), false)?;
        let encoder = TransformerEncoder::new(store, rng, "lgae.encoder", cfg.d_model, cfg.depth, cfg.heads)?;
        Ok(Lgae {
            fusion,
            to_model,
            cls,
            pos,
            encoder,
        })
    }

    /// Encodes per-scale appearance grids, guided by geometry grids when the
    /// model has landmark guidance. Attention maps are recorded as
    /// `s{i}.{dense,sparse,mixed,gate}`.
    pub fn forward(&self, ctx: &mut Ctx, appearance: &[Var], geometry: Option<&[Var]>) -> Result<TokenBundle> {
        let mut parts = Vec::with_capacity(appearance.len());
        let mut group_sizes = Vec::with_capacity(appearance.len());
        for (i, &f_ir) in appearance.iter().enumerate() {
            let fused = match (&self.fusion, geometry) {
                (Some(blocks), Some(geo)) => {
                    let (y, st) = blocks[i].forward(ctx, f_ir, geo[i])?;
                    record_attention(ctx, i + 1, &st);
                    y
                }
                (None, _) => f_ir,
                (Some(_), None) => return Err(Error::config("ablation.landmark_guidance", "geometry grids missing")),
            };
            group_sizes.push(ctx.shape(fused)[1]);
            parts.push(self.to_model[i].forward(ctx, fused)?);
        }
        let x = ctx.concat(&parts, 1)?;
        let x = prepend_token(ctx, self.cls, x)?;
        let pos = ctx.param(self.pos);
        let x = ctx.add(x, pos)?;
        let h = self.encoder.forward(ctx, x)?;
        let s = ctx.shape(h).to_vec();
        let z = ctx.slice(h, 1, 0, 1)?;
        let z_cls = ctx.reshape(z, &[s[0], s[2]])?;
        let x = ctx.slice(h, 1, 1, s[1] - 1)?;
        Ok(TokenBundle { x, z_cls, group_sizes })
    }
}

fn record_attention(ctx: &mut Ctx, scale: usize, st: &BgcaAttentionState) {
    ctx.record(format!("s{scale}.dense"), st.dense);
    if let Some(sp) = st.sparse {
        ctx.record(format!("s{scale}.sparse"), sp);
    }
    ctx.record(format!("s{scale}.mixed"), st.mixed);
    if let Some(g) = st.g {
        ctx.record(format!("s{scale}.gate"), g);
    }
}
