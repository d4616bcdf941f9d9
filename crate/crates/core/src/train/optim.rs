use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum, or the first-moment decay under Adam.
    pub momentum: f64,
    pub weight_decay: f64,
}

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with one state slot per parameter, matched by position.
///
/// SGD: `v = momentum * v + g + wd * p; p -= lr * v`.
/// Adam: the gradient `g + wd * p` drives bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F: Scalar> {
    pub settings: OptimizerSettings,
    pub step: u64,
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<Vec<F>>,
    /// Second moment; empty for SGD.
    pub second: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(settings: OptimizerSettings, params: &[&Parameter<F>]) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        let second = match settings.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => zeros(),
        };
        Optimizer { settings, step: 0, first: zeros(), second }
    }

    /// Applies one update using each parameter's accumulated gradient (absent means zero).
    pub fn apply(&mut self, params: &mut [&mut Parameter<F>]) -> Result<()> {
        let grads: Vec<Option<Vec<F>>> = params.iter().map(|p| p.grad()).collect();
        self.apply_with(params, &grads)
    }

    pub fn apply_with(&mut self, params: &mut [&mut Parameter<F>], grads: &[Option<Vec<F>>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Incompatible {
                field: "optimizer".into(),
                detail: format!("{} state slots for {} parameters", self.first.len(), params.len()),
            });
        }
        self.step += 1;
        let s = self.settings;
        let (lr, mu, wd) = (F::lit(s.learning_rate), F::lit(s.momentum), F::lit(s.weight_decay));
        let t = self.step as i32;
        let (bias1, bias2) = (F::lit(1.0 - s.momentum.powi(t)), F::lit(1.0 - ADAM_BETA2.powi(t)));
        let (b2, eps) = (F::lit(ADAM_BETA2), F::lit(ADAM_EPS));
        for (i, p) in params.iter_mut().enumerate() {
            let theta = p.data();
            if self.first[i].len() != theta.len() {
                return Err(Error::Incompatible {
                    field: p.name().to_string(),
                    detail: format!("optimizer slot holds {} values, parameter {}", self.first[i].len(), theta.len()),
                });
            }
            let grad = |k: usize| grads[i].as_ref().map_or(F::zero(), |g| g[k]) + wd * theta[k];
            let updated: Vec<F> = match s.kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[i];
                    (0..theta.len())
                        .map(|k| {
                            v[k] = mu * v[k] + grad(k);
                            theta[k] - lr * v[k]
                        })
                        .collect()
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    (0..theta.len())
                        .map(|k| {
                            let g = grad(k);
                            m[k] = mu * m[k] + (F::one() - mu) * g;
                            v[k] = b2 * v[k] + (F::one() - b2) * g * g;
                            let m_hat = m[k] / bias1;
                            let v_hat = v[k] / bias2;
                            theta[k] - lr * m_hat / (v_hat.sqrt() + eps)
                        })
                        .collect()
                }
            };
            p.set_data(updated);
        }
        Ok(())
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<Vec<F>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::lit(max_norm / norm);
        grads.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|v| *v = *v * scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(kind: OptimizerKind, lr: f64, momentum: f64, wd: f64) -> OptimizerSettings {
        OptimizerSettings { kind, learning_rate: lr, momentum, weight_decay: wd }
    }

    fn step_once(opt: &mut Optimizer<f64>, p: &mut Parameter<f64>, g: f64) {
        opt.apply_with(&mut [p], &[Some(vec![g])]).unwrap();
    }

    #[test]
    fn sgd_constant_gradient_is_linear() {
        let mut p = Parameter::new("w", &[1], vec![2.0]);
        let mut opt = Optimizer::new(settings(OptimizerKind::Sgd, 0.1, 0.0, 0.0), &[&p]);
        for t in 1..=5 {
            step_once(&mut opt, &mut p, 1.0);
            assert!((p.data()[0] - (2.0 - 0.1 * t as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = Parameter::new("w", &[3], vec![1.0, -2.0, 0.5]);
        let mut opt = Optimizer::new(settings(OptimizerKind::Sgd, 0.1, 0.9, 0.0), &[&p]);
        opt.apply_with(&mut [&mut p], &[None]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        for g in [1e-3, 1.0, 250.0] {
            let mut p = Parameter::new("w", &[1], vec![0.0]);
            let mut opt = Optimizer::new(settings(OptimizerKind::Adam, 0.01, 0.9, 0.0), &[&p]);
            step_once(&mut opt, &mut p, g);
            assert!((p.data()[0] + 0.01).abs() < 1e-6, "{}", p.data()[0]);
        }
    }

    #[test]
    fn doubled_loss_halved_rate_matches() {
        let mut a = Parameter::new("w", &[2], vec![1.0, 3.0]);
        let mut b = Parameter::new("w", &[2], vec![1.0, 3.0]);
        let mut oa = Optimizer::new(settings(OptimizerKind::Sgd, 0.2, 0.0, 0.0), &[&a]);
        let mut ob = Optimizer::new(settings(OptimizerKind::Sgd, 0.1, 0.0, 0.0), &[&b]);
        oa.apply_with(&mut [&mut a], &[Some(vec![0.5, -0.25])]).unwrap();
        ob.apply_with(&mut [&mut b], &[Some(vec![1.0, -0.5])]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((clip_grad_norm(&mut g, 10.0) - 1.0).abs() < 1e-12);
    }
}
