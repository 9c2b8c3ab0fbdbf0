//! Central-difference gradient verification.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: Vec<ElementCheck>,
    /// Elements whose ±h neighbourhood crosses a non-differentiable point.
    pub skipped: Vec<usize>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ElementCheck> {
        self.checked.iter().filter(move |c| c.rel_error >= self.tol)
    }
}

/// A scalar evaluation plus the kink signature seen while computing it.
pub type Probe = (f64, Option<u64>);

/// Compares `analytic` against `(f(x+h·e) − f(x−h·e)) / 2h` at `indices`.
/// `eval` maps a perturbed copy of `x` to the function value.
pub fn check_indices(
    mut eval: impl FnMut(&Tensor) -> Result<Probe>,
    x: &Tensor,
    analytic: &[f64],
    base_signature: Option<u64>,
    indices: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        tol,
        ..Default::default()
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, sp) = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, sm) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if sp != base_signature || sm != base_signature {
            report.skipped.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked.push(ElementCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: rel,
        });
    }
    Ok(report)
}

/// Checks the gradient of scalar `f` with respect to every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let run = |input: &Tensor, with_grad: bool| -> Result<(f64, Option<u64>, Option<Tensor>)> {
        let mut g = Graph::new();
        g.track_kinks();
        let xv = g.leaf(input.clone(), with_grad);
        let y = f(&mut g, xv)?;
        let value = g.value(y).item();
        let grad = if with_grad {
            g.backward(y)?;
            Some(g.grad(xv).unwrap_or_else(|| Tensor::zeros(input.shape())))
        } else {
            None
        };
        Ok((value, g.kink_signature(), grad))
    };
    let (_, sig, grad) = run(x, true)?;
    let analytic = grad.expect("requested gradient");
    let indices: Vec<usize> = (0..x.numel()).collect();
    check_indices(
        |p| run(p, false).map(|(v, s, _)| (v, s)),
        x,
        analytic.data(),
        sig,
        &indices,
        h,
        tol,
    )
}
