//! SGD with momentum under a fixed mask, and the per-minibatch gradient
//! stream that feeds the Fisher estimator.

use serde::{Deserialize, Serialize};

use super::data::{Batcher, Dataset};
use super::loss::Kd;
use super::model::ToyModel;
use crate::error::{Error, Result};
use crate::fisher::GradientSample;
use crate::scalar::Scalar;
use crate::store::Mask;

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { momentum: default_momentum(), weight_decay: 0.0 }
    }
}

/// `v ← μv + g + λw`, `w ← w − lr·v`; masked coordinates are held at zero.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: OptimizerConfig,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self { config, velocity: vec![T::zero(); n_params] }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64, mask: Option<&Mask>) {
        let (mu, wd, lr) = (T::lit(self.config.momentum), T::lit(self.config.weight_decay), T::lit(lr));
        for ((w, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
        if let Some(mask) = mask {
            mask.zero_pruned(&mut params[..mask.len()]);
            mask.zero_pruned(&mut self.velocity[..mask.len()]);
        }
    }

    /// Drops accumulated momentum (used when the mask changes).
    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpanStats {
    pub steps: usize,
    pub mean_loss: f64,
    pub last_loss: f64,
}

/// Everything a training step reads besides the model.
pub struct StepContext<'a, T> {
    pub data: &'a Dataset<T>,
    pub batcher: &'a mut Batcher,
    pub mask: Option<&'a Mask>,
    pub kd: Option<&'a Kd<'a, T>>,
}

/// One optimizer step on the next minibatch; returns the batch loss.
pub fn train_step<T: Scalar>(model: &mut ToyModel<T>, ctx: &mut StepContext<'_, T>, opt: &mut Sgd<T>, lr: f64, step: usize) -> Result<f64> {
    let (batch, _) = ctx.batcher.next_batch(ctx.data);
    let (loss, grad) = model.loss_and_grad(&batch, ctx.kd, ctx.mask)?;
    let loss = loss.to_f64_lossy();
    if loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { step, loss });
    }
    opt.step(model.params_mut(), &grad, lr, ctx.mask);
    Ok(loss)
}

/// Runs one step per entry of `lrs`.
pub fn train_span<T: Scalar>(model: &mut ToyModel<T>, ctx: &mut StepContext<'_, T>, opt: &mut Sgd<T>, lrs: &[f64]) -> Result<SpanStats> {
    let mut stats = SpanStats::default();
    let mut total = 0.0;
    for (step, &lr) in lrs.iter().enumerate() {
        stats.last_loss = train_step(model, ctx, opt, lr, step)?;
        total += stats.last_loss;
        stats.steps += 1;
    }
    stats.mean_loss = if stats.steps > 0 { total / stats.steps as f64 } else { 0.0 };
    Ok(stats)
}

/// Per-minibatch gradients of the prunable weights at the current (masked)
/// parameters. Cycles through the data, reshuffling when exhausted.
pub struct GradientStream<'a, T> {
    model: &'a ToyModel<T>,
    ctx: StepContext<'a, T>,
    remaining: usize,
}

pub fn gradient_stream<'a, T: Scalar>(model: &'a ToyModel<T>, ctx: StepContext<'a, T>, count: usize) -> GradientStream<'a, T> {
    GradientStream { model, ctx, remaining: count }
}

impl<T: Scalar> Iterator for GradientStream<'_, T> {
    type Item = Result<GradientSample<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let (batch, wrapped) = self.ctx.batcher.next_batch(self.ctx.data);
        if wrapped {
            log::info!("gradient stream exhausted the data, reshuffling (pass {})", self.ctx.batcher.passes());
        }
        Some(self.model.loss_and_grad(&batch, self.ctx.kd, self.ctx.mask).and_then(|(_, mut g)| {
            g.truncate(self.model.dim());
            GradientSample::new(g)
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
