//! Adam with optional decoupled weight decay, and global-norm gradient clipping.

use crate::model::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            let m = beta1 * self.m[i].as_f64() + (1.0 - beta1) * g;
            let v = beta2 * self.v[i].as_f64() + (1.0 - beta2) * g * g;
            self.m[i] = F::from_f64_lossy(m);
            self.v[i] = F::from_f64_lossy(v);
            let p = params[i].as_f64();
            let upd = (m / bc1) / ((v / bc2).sqrt() + eps) + weight_decay * p;
            params[i] = F::from_f64_lossy(p - lr * upd);
        }
    }
}

pub fn grad_norm<F: Scalar>(grads: &[F]) -> f64 {
    grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [F], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
