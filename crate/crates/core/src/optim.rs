//! Gradient-descent updates with optional adaptive moments.

use std::collections::BTreeMap;

use crate::params::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    /// Plain gradient step `w -= lr * g`.
    Sgd,
    /// Adaptive-moment estimation with bias correction.
    Adam,
}

struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
    step: u64,
}

/// Per-parameter optimizer state keyed by parameter name. Defaults:
/// lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
pub struct Optimizer<S: Real> {
    pub learning_rate: S,
    pub kind: OptimKind,
    beta1: S,
    beta2: S,
    eps: S,
    moments: BTreeMap<String, Moments<S>>,
}

impl<S: Real> Optimizer<S> {
    pub fn adam(learning_rate: S) -> Self {
        assert!(learning_rate > S::zero(), "learning rate must be positive");
        Optimizer {
            learning_rate,
            kind: OptimKind::Adam,
            beta1: S::from_f64_c(0.9),
            beta2: S::from_f64_c(0.999),
            eps: S::from_f64_c(1e-8),
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(learning_rate: S) -> Self {
        assert!(learning_rate > S::zero(), "learning rate must be positive");
        Optimizer {
            learning_rate,
            kind: OptimKind::Sgd,
            beta1: S::zero(),
            beta2: S::zero(),
            eps: S::zero(),
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update to every named parameter in `grads`. Parameters
    /// not mentioned are left untouched, as are their moment buffers.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[(String, Tensor<S>)]) -> Result<()> {
        for (name, grad) in grads {
            let param = params.get_mut(name);
            if !param.requires_grad {
                continue;
            }
            assert_eq!(param.value.shape(), grad.shape(), "gradient shape mismatch for {name}");
            match self.kind {
                OptimKind::Sgd => {
                    for (w, &g) in param.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.learning_rate * g;
                    }
                }
                OptimKind::Adam => {
                    let entry = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: Tensor::zeros(grad.shape().to_vec()),
                        v: Tensor::zeros(grad.shape().to_vec()),
                        step: 0,
                    });
                    entry.step += 1;
                    let t = entry.step as i32;
                    let bc1 = S::one() - self.beta1.powi(t);
                    let bc2 = S::one() - self.beta2.powi(t);
                    for i in 0..grad.numel() {
                        let g = grad.data()[i];
                        let m = &mut entry.m.data_mut()[i];
                        *m = self.beta1 * *m + (S::one() - self.beta1) * g;
                        let mh = *m / bc1;
                        let v = &mut entry.v.data_mut()[i];
                        *v = self.beta2 * *v + (S::one() - self.beta2) * g * g;
                        let vh = *v / bc2;
                        param.value.data_mut()[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
            if !param.value.all_finite() {
                return Err(Error::Numeric(format!("non-finite update for parameter {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    #[test]
    fn sgd_example() {
        let mut p = ParamSet::new();
        p.add("w", Tensor64::scalar(1.0));
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut p, &[("w".into(), Tensor64::scalar(0.5))]).unwrap();
        assert!((p.get("w").value.scalar_value() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamSet::new();
        p.add("w", Tensor64::new(vec![2], vec![0.25, -1.5]));
        let mut opt = Optimizer::adam(1e-3);
        opt.step(&mut p, &[("w".into(), Tensor64::zeros(vec![2]))]).unwrap();
        assert_eq!(p.get("w").value.data(), &[0.25, -1.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With g = 1 everywhere, step 1: m_hat = 1, v_hat = 1, so the
        // update is lr / (1 + eps) for every coordinate.
        let lr = 1e-3;
        let mut p = ParamSet::new();
        p.add("w", Tensor64::new(vec![3], vec![0.0, 1.0, -2.0]));
        let before = p.get("w").value.clone();
        let mut opt = Optimizer::adam(lr);
        opt.step(&mut p, &[("w".into(), Tensor64::full(vec![3], 1.0))]).unwrap();
        let expected = lr / (1.0 + 1e-8);
        for (a, b) in p.get("w").value.data().iter().zip(before.data()) {
            assert!(((b - a) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_parameter_not_updated() {
        let mut p = ParamSet::new();
        p.add("w", Tensor64::scalar(1.0));
        p.get_mut("w").requires_grad = false;
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut p, &[("w".into(), Tensor64::scalar(1.0))]).unwrap();
        assert_eq!(p.get("w").value.scalar_value(), 1.0);
    }
}
