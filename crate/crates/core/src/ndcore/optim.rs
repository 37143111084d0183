use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters and the warmup + cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl AdamWConfig {
    /// β2/ε used for transformer image towers.
    pub fn vit(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.2,
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// β2/ε used for convolutional image towers.
    pub fn resnet(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        AdamWConfig {
            beta2: 0.999,
            eps: 1e-8,
            ..AdamWConfig::vit(base_lr, warmup_steps, total_steps)
        }
    }
}

/// Learning rate at `step`: linear warmup from 0, then cosine decay to 0 at
/// `total_steps`. Steps past the end are clamped.
pub fn cosine_lr(step: usize, cfg: &AdamWConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        OptimizerState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One AdamW update at the scheduled learning rate. Returns the rate used.
    pub fn adamw_step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        let lr = cosine_lr(self.step + 1, &self.config);
        self.adamw_step_with_lr(params, grads, lr)?;
        Ok(lr)
    }

    /// One AdamW update at an explicit learning rate.
    ///
    /// Bias-corrected Adam direction plus decoupled decay `lr·wd·θ` on
    /// parameters flagged for decay; gains, biases and scalars are not decayed.
    pub fn adamw_step_with_lr(
        &mut self,
        params: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.decay { lr * c.weight_decay } else { 0.0 };
            for (((theta, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *theta -= lr * update + decay * *theta;
            }
        }
        Ok(())
    }
}
