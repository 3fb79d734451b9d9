//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters. Only the learning rate is dataset-tuned; the
/// rest are the usual defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Slot {
    name: String,
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW over a fixed parameter set.
///
/// Update order per step (decay reads the pre-update parameter):
///
/// ```text
/// p ← p·(1 − lr·wd)
/// m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
/// p ← p − lr·(m/(1−β1ᵗ)) / (√(v/(1−β2ᵗ)) + ε)
/// ```
pub struct AdamW {
    config: AdamWConfig,
    slots: Vec<Slot>,
    step_count: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: Vec<(String, Tensor)>) -> AdamW {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.numel();
                Slot { name, param, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        AdamW { config, slots, step_count: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.param))
    }

    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }

    /// Apply one update using each parameter's accumulated gradient and the
    /// given learning rate. Parameters without a gradient are skipped.
    /// Any non-finite gradient aborts before touching parameters.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        for slot in &self.slots {
            if let Some(g) = slot.param.grad() {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::contract(format!(
                        "non-finite gradient {bad} in parameter `{}`; aborting optimizer step",
                        slot.name
                    )));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for slot in &mut self.slots {
            let Some(grad) = slot.param.grad() else {
                continue;
            };
            slot.param.with_data_mut(|p| {
                for i in 0..p.len() {
                    // Decoupled decay, then the adaptive update.
                    p[i] *= 1.0 - lr * c.weight_decay;
                    let g = grad[i];
                    slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                    slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = slot.m[i] / bias1;
                    let v_hat = slot.v[i] / bias2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            });
        }
        Ok(())
    }
}

/// Result of a clipping pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    /// Global L2 norm before clipping.
    pub global_norm: f64,
    /// Factor applied to every gradient (1.0 when under the limit).
    pub scale: f64,
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(params: &[(String, Tensor)], max_norm: f64) -> ClipReport {
    let mut sum_sq = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                sum_sq += v * v;
            }
        }
    }
    let global_norm = sum_sq.sqrt();
    if global_norm <= max_norm || global_norm == 0.0 {
        return ClipReport { global_norm, scale: 1.0 };
    }
    let scale = max_norm / global_norm;
    for (_, p) in params {
        if let Some(mut g) = p.grad() {
            for v in g.iter_mut() {
                *v *= scale;
            }
            p.zero_grad();
            p.accumulate_grad(&g);
        }
    }
    ClipReport { global_norm, scale }
}
