use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected update in place. Fails before touching anything
    /// if a gradient is non-finite.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TrainError> {
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(TrainError::NonFiniteGradient { param: i });
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let before = p.clone();
        let mut a = Adam::new(&p);
        a.step(&AdamConfig::default(), &mut p, &[Tensor::zeros(vec![2])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn hand_computed_steps() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut a = Adam::new(&p);
        let g = [Tensor::scalar(1.0)];
        a.step(&cfg, &mut p, &g).unwrap();
        // m_hat = v_hat = 1, so the first step is lr / (1 + eps).
        assert!((p[0].item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        a.step(&cfg, &mut p, &g).unwrap();
        assert!((p[0].item() + 0.2).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = vec![Tensor::scalar(0.0), Tensor::scalar(1.0)];
        let mut a = Adam::new(&p);
        let err = a.step(&AdamConfig::default(), &mut p, &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { param: 1 })));
        assert_eq!(a.t, 0);
        assert_eq!(p[0].item(), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sq_norm() - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::scalar(0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }
}
