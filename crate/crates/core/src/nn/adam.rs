use serde::{Deserialize, Serialize};

use super::params::round_slice_to_f32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction (L2-coupled weight decay, zero by default).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_range(params, grads, 0..params.len(), self.cfg.lr);
        self.step += 1;
    }

    /// Applies one update to `params[range]` with an explicit learning rate.
    /// The step counter must be advanced separately with [`Adam::advance`]
    /// when several ranges share one logical step.
    pub fn step_range(&mut self, params: &mut [f64], grads: &[f64], range: std::ops::Range<usize>, lr: f64) {
        let t = (self.step + 1) as i32;
        let AdamConfig { beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in range {
            let g = grads[i] + weight_decay * params[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn round_to_f32(&mut self) {
        round_slice_to_f32(&mut self.m);
        round_slice_to_f32(&mut self.v);
    }
}
