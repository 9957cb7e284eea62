//! Decoupled-weight-decay Adam with global gradient-norm clipping.

use super::Params;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradient is clipped to.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err("optimizer settings out of range".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &Params) -> AdamW {
        AdamW {
            config,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
            decay: params.decay_mask(),
        }
    }

    /// Restore moment estimates saved alongside a checkpoint.
    pub fn with_state(config: OptimConfig, params: &Params, m: Vec<f64>, v: Vec<f64>, t: u64) -> Option<AdamW> {
        if m.len() != params.len() || v.len() != params.len() {
            return None;
        }
        Some(AdamW {
            config,
            m,
            v,
            t,
            decay: params.decay_mask(),
        })
    }

    /// One descent step on `grad` (gradient of the loss to minimize).
    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut Params, grad: &[f64]) -> f64 {
        let c = self.config;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            let g = grad[i] * scale;
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
            let decay = if self.decay[i] { c.weight_decay * params.data[i] } else { 0.0 };
            params.data[i] -= c.lr * (update + decay);
        }
        params.quantize();
        norm
    }
}
