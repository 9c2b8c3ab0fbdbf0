use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `θ ← θ − lr·wd·θ` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moments and step count of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Optimiser state, indexed like the parameters of the store it was built for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            moments: store
                .params()
                .iter()
                .map(|p| {
                    if p.frozen {
                        Moments::default()
                    } else {
                        Moments {
                            m: vec![0.0; p.value.numel()],
                            v: vec![0.0; p.value.numel()],
                            step: 0,
                        }
                    }
                })
                .collect(),
        }
    }
}

/// One Adam update over every trainable parameter that holds a gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    for (p, mo) in store.params_mut().iter_mut().zip(&mut state.moments) {
        if p.frozen {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else { continue };
        mo.step += 1;
        let t = mo.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let g = grad.data()[i];
            theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
            mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
            mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mo.m[i] / bc1;
            let v_hat = mo.v[i] / bc2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("w", Tensor::new(&[n], values).unwrap(), false).unwrap();
        s.accumulate_grad(id, &grad);
        s
    }

    #[test]
    fn first_step_is_normalised_gradient() {
        let g = vec![0.5, -2.0, 1e-3];
        let mut s = store_with(vec![1.0, 1.0, 1.0], g.clone());
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &cfg);
        for (i, gi) in g.iter().enumerate() {
            let expected = 1.0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            let got = s.params()[0].value.data()[i];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        }
    }

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let mut s = store_with(vec![0.3, -0.7], vec![0.0, 0.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &mut st, &cfg);
        }
        assert_eq!(s.params()[0].value.data(), &[0.3, -0.7]);
    }

    #[test]
    fn decoupled_decay_applies_before_moments() {
        let mut s = store_with(vec![2.0], vec![0.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &cfg);
        assert_eq!(s.params()[0].value.data(), &[2.0 - 0.1 * 0.5 * 2.0]);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("f", Tensor::ones(&[2]), true).unwrap();
        s.accumulate_grad(id, &[1.0, 1.0]);
        assert!(s.get(id).grad.is_none());
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default());
        assert_eq!(s.get(id).value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut s = store_with(vec![0.1, 0.2, 0.3], vec![0.0; 3]);
            let mut st = AdamState::new(&s);
            for k in 0..10 {
                s.zero_grad();
                let id = s.id("w").unwrap();
                let g: Vec<f64> = (0..3).map(|i| ((k * 3 + i) as f64).sin()).collect();
                s.accumulate_grad(id, &g);
                adam_step(&mut s, &mut st, &AdamConfig::default());
            }
            s.params()[0].value.clone()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
