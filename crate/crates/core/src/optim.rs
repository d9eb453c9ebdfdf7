//! Adam with coupled L2 weight decay.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tensor::{lit, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay · θ` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state for an ordered list of parameter tensors. The list must
/// keep the same order and sizes between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every element inside each tensor's range. Tensors
    /// without a gradient buffer are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [(&mut Tensor<T>, Range<usize>)]) {
        if self.moments.len() != params.len() {
            self.moments = params
                .iter()
                .map(|(t, _)| Moments {
                    m: vec![T::zero(); t.numel()],
                    v: vec![T::zero(); t.numel()],
                })
                .collect();
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let (lr, eps, wd) = (lit::<T>(c.lr), lit::<T>(c.eps), lit::<T>(c.weight_decay));
        let t = self.step as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        for ((param, range), mom) in params.iter_mut().zip(&mut self.moments) {
            assert_eq!(mom.m.len(), param.numel(), "parameter list changed between steps");
            let grad = param.grad().map(<[T]>::to_vec);
            let data = param.data_mut();
            for i in range.clone() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + wd * data[i];
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * g * g;
                let m_hat = mom.m[i] / bias1;
                let v_hat = mom.v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap().into_param();
        t.accumulate_grad(grad);
        t
    }

    /// Straight transcription of the textbook update for a single scalar.
    fn reference(theta: f64, grads: &[f64], c: &AdamConfig) -> f64 {
        let (mut m, mut v, mut th) = (0.0, 0.0, theta);
        for (k, &g0) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            let g = g0 + c.weight_decay * th;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            th -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        th
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg);
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let before = p.data().to_vec();
        adam.step(&mut [(&mut p, 0..2)]);
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn matches_reference_over_several_steps() {
        let cfg = AdamConfig::default();
        let grads = [0.3, -1.2, 0.05, 2.0, -0.4];
        let mut adam = Adam::new(cfg);
        let mut p = Tensor::new(&[1], vec![0.7]).unwrap().into_param();
        for &g in &grads {
            p.zero_grad();
            p.accumulate_grad(&[g]);
            adam.step(&mut [(&mut p, 0..1)]);
        }
        let expect = reference(0.7, &grads, &cfg);
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [1e-3, 0.5, 7.0, -300.0] {
            let mut adam = Adam::new(cfg);
            let mut p = param(&[0.0], &[g]);
            adam.step(&mut [(&mut p, 0..1)]);
            let delta = p.data()[0];
            assert!((delta + cfg.lr * g.signum()).abs() < 1e-8, "g={g} delta={delta}");
        }
    }

    #[test]
    fn respects_update_range() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = param(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
        adam.step(&mut [(&mut p, 1..3)]);
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] < 1.0 && p.data()[2] < 1.0);
    }
}
