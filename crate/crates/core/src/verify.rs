//! Finite-difference checks of parameter gradients through whole forward
//! passes.

use std::fmt;

use crate::backbones::ImageSample;
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::rng::Rng;
use crate::tensor::gradcheck::{check_indices, GradCheckReport};
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::training::total_loss;

/// Central-difference step of the model check.
pub const STEP: f64 = 1e-5;
/// Relative-error bound of the model check.
pub const TOLERANCE: f64 = 1e-3;

/// Checks d(loss)/d(param) at `indices` (all elements when `None`).
/// `loss` builds a scalar from a fresh train-mode context; running
/// statistics are never written back.
pub fn check_param<F>(
    store: &ParamStore,
    id: ParamId,
    loss: F,
    indices: Option<&[usize]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let eval = |s: &ParamStore, with_grad: bool| -> Result<(f64, Option<u64>, Option<Tensor>)> {
        let mut ctx = Ctx::new(s, Mode::Train);
        ctx.graph.track_kinks();
        let out = loss(&mut ctx)?;
        let value = ctx.value(out).item();
        let sig = ctx.kink_signature();
        let grad = if with_grad {
            let grads = ctx.backward(out)?;
            let shape = s.get(id).value.shape().to_vec();
            Some(
                grads
                    .into_iter()
                    .find(|(g, _)| *g == id)
                    .map(|(_, t)| t)
                    .unwrap_or_else(|| Tensor::zeros(&shape)),
            )
        } else {
            None
        };
        Ok((value, sig, grad))
    };
    let (_, sig, grad) = eval(store, true)?;
    let analytic = grad.expect("gradient requested");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..analytic.numel()).collect();
            &all
        }
    };
    let mut probe_store = store.clone();
    let x = store.get(id).value.clone();
    check_indices(
        |p| {
            probe_store.get_mut(id).value = p.clone();
            eval(&probe_store, false).map(|(v, s, _)| (v, s))
        },
        &x,
        analytic.data(),
        sig,
        indices,
        h,
        tol,
    )
}

/// `cfg` with every dimension shrunk so that each scale has at most 8
/// tokens and a full forward pass is cheap. Flags, template, gate source,
/// temperature and the other scalar settings are kept.
pub fn shrink_config(cfg: &RunConfig) -> RunConfig {
    let mut small = cfg.clone();
    small.data.image_size = 8;
    let m = &mut small.model;
    m.patch_sizes = vec![4, 4, 4];
    m.scale_dims = vec![4, 5, 6];
    m.bgca_head_dim = 3;
    m.bgca_heads = 1;
    m.d_model = 8;
    m.depth = 1;
    m.heads = 2;
    m.csl_dim = 6;
    m.head_depth = 1;
    m.d_clip = 8;
    m.teacher_pool = 4;
    small
}

/// Result of checking one trainable parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub checks: Vec<ParamCheck>,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.report.passed())
    }

    /// Names and worst relative errors of failing parameters.
    pub fn failures(&self) -> Vec<(&str, f64)> {
        self.checks
            .iter()
            .filter(|c| !c.report.passed())
            .map(|c| (c.name.as_str(), c.report.max_rel_error))
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for ModelGradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.report.passed() { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{status} {:<40} checked {:>3} skipped {:>2} max_rel {:.3e}",
                c.name,
                c.report.checked.len(),
                c.report.skipped.len(),
                c.report.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// Checks every trainable parameter of the model built from
/// [`shrink_config`]`(cfg)` against the full training loss on a random
/// two-pair batch. Every entry is probed, or at most `elements` per tensor
/// chosen by a seeded draw. Frozen parameters are not checked.
pub fn gradcheck_model(cfg: &RunConfig, elements: Option<usize>) -> Result<ModelGradCheck> {
    let small = shrink_config(cfg);
    let model = Model::new(&small)?;
    let mut rng = Rng::new(small.seed).split("gradcheck");
    let size = small.data.image_size;
    let classes = model.num_classes();
    let mut images = Vec::with_capacity(4);
    for i in 0..4 {
        let pixels = Tensor::from_fn(&[3, size, size], |_| rng.unit());
        images.push(ImageSample::new(format!("probe{i}"), 0, pixels)?);
    }
    let labels = [rng.below(classes), rng.below(classes)];
    let lambda = small.train.lambda;
    let loss = |ctx: &mut Ctx| {
        let out = model.forward_pair(ctx, &[&images[0], &images[1]], &[&images[2], &images[3]])?;
        Ok(total_loss(ctx, &out, &labels, lambda)?.0)
    };
    let mut checks = Vec::new();
    for id in model.store.ids() {
        let p = model.store.get(id);
        if p.frozen {
            continue;
        }
        let n = p.value.numel();
        let mut all: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut all);
        all.truncate(elements.unwrap_or(n).min(n));
        all.sort_unstable();
        let report = check_param(&model.store, id, loss, Some(&all), STEP, TOLERANCE)?;
        checks.push(ParamCheck {
            name: p.name.clone(),
            report,
        });
    }
    Ok(ModelGradCheck { checks })
}
