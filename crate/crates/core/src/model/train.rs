use rand::RngCore;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Scalar, Tensor};

use super::config::ModelConfig;
use super::forward::{label_smoothed_ce, model_forward, Mode};
use super::optim::{clip_grad_norm, AdamW, OptimConfig};
use super::params::ModelParams;

/// Network-ready samples: `x: [B, T, V, 3]` in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub t_norm: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    /// Stack `[T, V, 3]` clips.
    pub fn stack(clips: &[(Tensor<T>, Vec<f64>, usize)]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| dim_err("empty batch"))?;
        let shape = first.0.shape().to_vec();
        let mut data = Vec::with_capacity(clips.len() * first.0.numel());
        for (x, _, _) in clips {
            if x.shape() != shape.as_slice() {
                return Err(dim_err(format!("batch mixes shapes {shape:?} and {:?}", x.shape())));
            }
            data.extend_from_slice(x.data());
        }
        let mut full = vec![clips.len()];
        full.extend_from_slice(&shape);
        Ok(Self {
            x: Tensor::from_vec(&full, data)?,
            t_norm: clips.iter().map(|c| c.1.clone()).collect(),
            labels: clips.iter().map(|c| c.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub correct: usize,
}

/// Row-wise argmax of `[B, N_c]`.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let nc = logits.shape()[1];
    logits
        .data()
        .chunks(nc)
        .map(|r| r.iter().enumerate().fold(0, |best, (i, v)| if *v > r[best] { i } else { best }))
        .collect()
}

/// Forward, loss, backward, clip, AdamW update and batch-norm buffer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    batch: &Batch<T>,
    cfg: &ModelConfig,
    ocfg: &OptimConfig,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let out = model_forward(&mut g, params, &batch.x, &batch.t_norm, cfg, Mode::Train(rng))?;
    let loss = label_smoothed_ce(&mut g, out.logits, &batch.labels, ocfg.label_smoothing)?;
    let loss_value = g.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        let logits = g.value(out.logits);
        return Err(Error::Numeric(format!(
            "non-finite loss {loss_value} (max |logit| {}, optimizer step {}, lr {lr:e})",
            logits.max_abs().as_f64(),
            opt.step,
        )));
    }
    let correct = argmax_rows(g.value(out.logits)).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    let mut grads = g.backward(loss)?.into_named();
    let grad_norm = clip_grad_norm(&mut grads, ocfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at optimizer step {}", opt.step)));
    }
    opt.update(&mut params.tensors, &grads, lr, ocfg)?;
    for (name, t) in out.bn_updates {
        params.tensors.insert(name, t);
    }
    Ok(StepStats { loss: loss_value, grad_norm, correct })
}
