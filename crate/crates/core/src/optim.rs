//! Decoupled-weight-decay Adam and the warmup + cosine learning-rate shape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters missing from `grads`
    /// are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let n = tensor.numel();
            let grad = grads.get(name);
            if let Some(gr) = grad {
                if gr.len() != n {
                    bail!(Shape, "gradient for {name} has {} values, expected {n}", gr.len());
                }
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = tensor.data_mut();
            for i in 0..n {
                let gi = grad.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] *= 1.0 - lr * weight_decay;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !data.iter().all(|x| x.is_finite()) {
                bail!(Numeric, "parameter {name} became non-finite");
            }
        }
        Ok(())
    }
}

/// Linear warmup from `base_lr` to `peak_lr`, then cosine decay back to
/// `base_lr` at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let span = self.peak_lr - self.base_lr;
        if step < self.warmup_steps {
            return self.base_lr + span * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return self.peak_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.base_lr + 0.5 * span * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
