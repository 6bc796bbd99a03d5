use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kv::{self, KvFile};
use crate::numerics::{cst, ParamMap, Scalar, Tensor};

use super::params::{is_buffer, no_decay};

/// Optimizer, schedule and loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_lr: 1e-7,
            min_lr: 1e-5,
            warmup_epochs: 25,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            label_smoothing: 0.1,
        }
    }
}

impl OptimConfig {
    /// Short schedule for the synthetic desk runs.
    pub fn desk() -> Self {
        Self { epochs: 60, batch_size: 8, base_lr: 2e-3, warmup_epochs: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.base_lr >= 0.0 && self.warmup_lr >= 0.0 && self.min_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("weight_decay must be ≥ 0 and clip_norm > 0");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        kv::push(out, "optim.epochs", self.epochs);
        kv::push(out, "optim.batch_size", self.batch_size);
        kv::push(out, "optim.base_lr", self.base_lr);
        kv::push(out, "optim.warmup_lr", self.warmup_lr);
        kv::push(out, "optim.min_lr", self.min_lr);
        kv::push(out, "optim.warmup_epochs", self.warmup_epochs);
        kv::push(out, "optim.weight_decay", self.weight_decay);
        kv::push(out, "optim.beta1", self.beta1);
        kv::push(out, "optim.beta2", self.beta2);
        kv::push(out, "optim.eps", self.eps);
        kv::push(out, "optim.clip_norm", self.clip_norm);
        kv::push(out, "optim.label_smoothing", self.label_smoothing);
    }

    pub fn read_kv(&mut self, kv: &mut KvFile) -> Result<()> {
        kv.set("optim.epochs", &mut self.epochs)?;
        kv.set("optim.batch_size", &mut self.batch_size)?;
        kv.set("optim.base_lr", &mut self.base_lr)?;
        kv.set("optim.warmup_lr", &mut self.warmup_lr)?;
        kv.set("optim.min_lr", &mut self.min_lr)?;
        kv.set("optim.warmup_epochs", &mut self.warmup_epochs)?;
        kv.set("optim.weight_decay", &mut self.weight_decay)?;
        kv.set("optim.beta1", &mut self.beta1)?;
        kv.set("optim.beta2", &mut self.beta2)?;
        kv.set("optim.eps", &mut self.eps)?;
        kv.set("optim.clip_norm", &mut self.clip_norm)?;
        kv.set("optim.label_smoothing", &mut self.label_smoothing)?;
        Ok(())
    }
}

/// Per-step learning rate: linear warmup, then cosine decay to `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, steps_per_epoch: usize) -> Self {
        Self {
            warmup_lr: cfg.warmup_lr,
            base_lr: cfg.base_lr,
            min_lr: cfg.min_lr,
            warmup_steps: cfg.warmup_epochs.min(cfg.epochs) * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * f;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let f = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * f).cos())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &ParamMap<T>) -> f64 {
    grads.values().map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamMap<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s: T = cst(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: ParamMap<T>,
    pub v: ParamMap<T>,
    pub step: u64,
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        Self { m: ParamMap::new(), v: ParamMap::new(), step: 0 }
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamMap<T>, grads: &ParamMap<T>, lr: f64, cfg: &OptimConfig) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if is_buffer(name) {
                continue;
            }
            let p = params.get_mut(name).ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::State(format!("gradient shape {:?} vs parameter {:?} for {name}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = if no_decay(name) { 0.0 } else { cfg.weight_decay };
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            for i in 0..g.numel() {
                let gi = g.data()[i].as_f64();
                let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = cst(mi);
                v.data_mut()[i] = cst(vi);
                let step = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                let pi = p.data()[i].as_f64();
                p.data_mut()[i] = cst(pi - lr * decay * pi - lr * step);
            }
        }
        Ok(())
    }
}
