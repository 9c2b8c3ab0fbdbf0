//! Vision-language branch: teacher-refined class token, per-instance prompt
//! bias and cosine logits against the fixed class text features.

use crate::config::{ModelConfig, VlesConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::rng::Rng;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Attention of each query row over its sample's keys, with the keys used as
/// values: `query (B, d)`, `keys (B, K, d)` → `(B, d)`. With one key the
/// weight is exactly 1.
pub fn attend_keys(ctx: &mut Ctx, query: Var, keys: Var) -> Result<Var> {
    let qs = ctx.shape(query).to_vec();
    let ks = ctx.shape(keys).to_vec();
    if qs.len() != 2 || ks.len() != 3 || ks[0] != qs[0] || ks[2] != qs[1] {
        return Err(Error::shape("teacher attention", &qs, &ks));
    }
    let (b, d) = (qs[0], qs[1]);
    let q = ctx.reshape(query, &[b, 1, d])?;
    let kt = ctx.transpose(keys)?;
    let s = ctx.matmul(q, kt)?;
    let s = ctx.scale(s, 1.0 / (d as f64).sqrt());
    let w = ctx.softmax(s, -1)?;
    let out = ctx.matmul(w, keys)?;
    ctx.reshape(out, &[b, d])
}

/// `normalize(t_fix + alpha·Δt)` per sample: `t_fix (C, d)`, `delta (B, d)`
/// → `(B, C, d)` unit rows.
pub fn instance_text(ctx: &mut Ctx, t_fix: Var, delta: Var, alpha: f64) -> Result<Var> {
    let ds = ctx.shape(delta).to_vec();
    let ts = ctx.shape(t_fix).to_vec();
    if ds.len() != 2 || ts.len() != 2 || ds[1] != ts[1] {
        return Err(Error::shape("instance text", &ts, &ds));
    }
    let shift = ctx.scale(delta, alpha);
    let shift = ctx.reshape(shift, &[ds[0], 1, ds[1]])?;
    let shifted = ctx.add(shift, t_fix)?;
    ctx.l2_normalize(shifted)
}

/// `y[b][c] = ⟨v[b], t_hat[b][c]⟩ / tau`: `v (B, d)`, `t_hat (B, C, d)`.
pub fn semantic_logits(ctx: &mut Ctx, v: Var, t_hat: Var, tau: f64) -> Result<Var> {
    let vs = ctx.shape(v).to_vec();
    let ts = ctx.shape(t_hat).to_vec();
    if vs.len() != 2 || ts.len() != 3 || ts[0] != vs[0] || ts[2] != vs[1] {
        return Err(Error::shape("semantic logits", &vs, &ts));
    }
    let row = ctx.reshape(v, &[vs[0], 1, vs[1]])?;
    let tt = ctx.transpose(t_hat)?;
    let y = ctx.matmul(row, tt)?;
    let y = ctx.reshape(y, &[vs[0], ts[1]])?;
    Ok(ctx.scale(y, 1.0 / tau))
}

/// Intermediate values of one semantic pass.
#[derive(Clone, Copy, Debug)]
pub struct SemanticOutput {
    pub z_refined: Var,
    pub delta_t: Var,
    pub t_hat: Var,
    pub v: Var,
    pub y_sem: Var,
}

#[derive(Clone, Debug)]
pub struct Vles {
    /// Maps teacher embeddings into the visual token space.
    pub teacher_key: Linear,
    pub attn_out: Linear,
    /// Prompt-bias predictor; absent when the bias is disabled.
    pub prompt_bias: Option<Linear>,
    /// Bias-free projection into the text space.
    pub to_text: Linear,
    /// Frozen `(C, d_clip)` class text features.
    pub t_fix: ParamId,
    pub residual: bool,
    pub alpha: f64,
    pub tau: f64,
}

impl Vles {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, vcfg: &VlesConfig, t_fix: Tensor) -> Result<Self> {
        let (dm, dc) = (cfg.d_model, cfg.d_clip);
        if t_fix.shape() != [cfg.num_classes(), dc] {
            return Err(Error::shape("text features", t_fix.shape(), &[cfg.num_classes(), dc]));
        }
        let teacher_key = Linear::new(store, rng, "vles.teacher_key", dc, dm)?;
        let attn_out = Linear::new(store, rng, "vles.attn_out", dm, dm)?;
        let prompt_bias = if vcfg.ecp {
            Some(Linear::new(store, rng, "vles.prompt_bias", dm, dc)?)
        } else {
            None
        };
        let to_text = Linear::build(store, rng, "vles.to_text", dm, dc, false, false)?;
        let t_fix = store.add("teacher.text", t_fix, true)?;
        Ok(Vles {
            teacher_key,
            attn_out,
            prompt_bias,
            to_text,
            t_fix,
            residual: cfg.teacher_residual,
            alpha: vcfg.alpha,
            tau: vcfg.tau,
        })
    }

    /// Class token refined by attention to the teacher embedding:
    /// `z_cls (B, d_model)`, `f_tea (B, d_clip)` or `(B, K, d_clip)`.
    pub fn refine_visual(&self, ctx: &mut Ctx, z_cls: Var, f_tea: Var) -> Result<Var> {
        let fs = ctx.shape(f_tea).to_vec();
        let f_tea = if fs.len() == 2 { ctx.reshape(f_tea, &[fs[0], 1, fs[1]])? } else { f_tea };
        let keys = self.teacher_key.forward(ctx, f_tea)?;
        let attended = attend_keys(ctx, z_cls, keys)?;
        let out = self.attn_out.forward(ctx, attended)?;
        if self.residual {
            ctx.add(z_cls, out)
        } else {
            Ok(out)
        }
    }

    /// `tanh(W z̃ + b)`, identically zero when the bias is disabled.
    pub fn ecp_bias(&self, ctx: &mut Ctx, z_refined: Var) -> Result<Var> {
        match &self.prompt_bias {
            Some(lin) => {
                let h = lin.forward(ctx, z_refined)?;
                Ok(ctx.tanh(h))
            }
            None => {
                let b = ctx.shape(z_refined)[0];
                let d = self.to_text.fan_out;
                Ok(ctx.constant(Tensor::zeros(&[b, d])))
            }
        }
    }

    /// Unit-norm projection of the refined token into the text space.
    pub fn project_visual(&self, ctx: &mut Ctx, z_refined: Var) -> Result<Var> {
        let h = self.to_text.forward(ctx, z_refined)?;
        ctx.l2_normalize(h)
    }

    pub fn forward(&self, ctx: &mut Ctx, z_cls: Var, f_tea: Var) -> Result<SemanticOutput> {
        let z_refined = self.refine_visual(ctx, z_cls, f_tea)?;
        let delta_t = self.ecp_bias(ctx, z_refined)?;
        let t_fix = ctx.param(self.t_fix);
        let t_hat = instance_text(ctx, t_fix, delta_t, self.alpha)?;
        let v = self.project_visual(ctx, z_refined)?;
        let y_sem = semantic_logits(ctx, v, t_hat, self.tau)?;
        Ok(SemanticOutput {
            z_refined,
            delta_t,
            t_hat,
            v,
            y_sem,
        })
    }
}
