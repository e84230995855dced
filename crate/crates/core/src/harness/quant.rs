//! Per-tensor symmetric fake quantization of the weight matrices, trained
//! with a straight-through gradient.

use serde::{Deserialize, Serialize};

use super::model::ToyModel;
use super::train::{Sgd, SpanStats, StepContext, DIVERGENCE_LOSS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_bits")]
    pub bits: u32,
    /// Epochs during which the range observers track `max|w|`; frozen after.
    pub observer_epochs: usize,
}

fn default_bits() -> u32 {
    8
}

impl QuantConfig {
    /// Largest representable level, `2^(bits−1) − 1`.
    pub fn levels(&self) -> Result<f64> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Shape(format!("unsupported bit width {}", self.bits)));
        }
        Ok(((1u32 << (self.bits - 1)) - 1) as f64)
    }
}

/// `max|w| / levels`, or 1 for an all-zero tensor.
pub fn quant_scale<T: Scalar>(max_abs: T, levels: f64) -> T {
    if max_abs > T::zero() {
        max_abs / T::lit(levels)
    } else {
        T::one()
    }
}

/// Quantize-dequantize: `clamp(round_even(w / s), −L, L) · s`.
pub fn fake_quantize<T: Scalar>(w: &mut [T], scale: T, levels: f64) {
    let l = T::lit(levels);
    for x in w {
        *x = (*x / scale).round_even().max(-l).min(l) * scale;
    }
}

/// Running-max range observers, one per weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Observers<T> {
    pub maxima: Vec<T>,
    pub frozen: bool,
}

impl<T: Scalar> Observers<T> {
    pub fn new(model: &ToyModel<T>) -> Self {
        let maxima = model.tensors().iter().filter(|t| t.is_weight).map(|_| T::zero()).collect();
        Self { maxima, frozen: false }
    }

    pub fn observe(&mut self, model: &ToyModel<T>) {
        if self.frozen {
            return;
        }
        for (m, t) in self.maxima.iter_mut().zip(model.tensors().iter().filter(|t| t.is_weight)) {
            *m = model.params()[t.range()].iter().fold(*m, |acc, w| acc.max(w.abs()));
        }
    }

    /// A copy of `params` with every weight tensor fake-quantized.
    pub fn quantized(&self, model: &ToyModel<T>, levels: f64) -> Vec<T> {
        let mut q = model.params().to_vec();
        for (&m, t) in self.maxima.iter().zip(model.tensors().iter().filter(|t| t.is_weight)) {
            fake_quantize(&mut q[t.range()], quant_scale(m, levels), levels);
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantStats {
    pub span: SpanStats,
    pub scales: Vec<f64>,
}

/// Quantization-aware finetuning: the forward pass sees fake-quantized
/// weights, gradients update the float weights unchanged. On return the model
/// holds the quantized weights. Masked weights stay zero since `0 ↦ 0`.
pub fn fake_quant_finetune<T: Scalar>(
    model: &mut ToyModel<T>,
    ctx: &mut StepContext<'_, T>,
    opt: &mut Sgd<T>,
    qc: QuantConfig,
    lrs: &[f64],
    steps_per_epoch: usize,
) -> Result<QuantStats> {
    let levels = qc.levels()?;
    let mut obs = Observers::new(model);
    let observe_steps = qc.observer_epochs * steps_per_epoch;
    let mut stats = SpanStats::default();
    let mut total = 0.0;
    for (step, &lr) in lrs.iter().enumerate() {
        obs.frozen = step >= observe_steps;
        obs.observe(model);
        let q = obs.quantized(model, levels);
        let (batch, _) = ctx.batcher.next_batch(ctx.data);
        let (loss, grad) = model.loss_and_grad_with(&q, &batch, ctx.kd, ctx.mask)?;
        let loss = loss.to_f64_lossy();
        if loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(model.params_mut(), &grad, lr, ctx.mask);
        total += loss;
        stats.last_loss = loss;
        stats.steps += 1;
    }
    stats.mean_loss = if stats.steps > 0 { total / stats.steps as f64 } else { 0.0 };
    if lrs.is_empty() {
        obs.observe(model);
    }
    let q = obs.quantized(model, levels);
    model.set_params(q)?;
    if let Some(mask) = ctx.mask {
        mask.zero_pruned(model.prunable_mut());
    }
    let scales = obs.maxima.iter().map(|&m| quant_scale(m, levels).to_f64_lossy()).collect();
    Ok(QuantStats { span: stats, scales })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_are_fixed() {
        let scale = 0.5f64;
        let mut w = vec![0.0, 0.5, -1.0, 63.5, -63.5];
        let before = w.clone();
        fake_quantize(&mut w, scale, 127.0);
        assert_eq!(w, before);
    }

    #[test]
    fn rounds_ties_to_even_and_clamps() {
        let mut w = vec![0.25, 0.75, -0.25, 100.0, -100.0];
        fake_quantize(&mut w, 0.5, 127.0);
        assert_eq!(w, vec![0.0, 1.0, -0.0, 63.5, -63.5]);
    }

    #[test]
    fn zero_maps_to_zero_and_all_zero_scale_falls_back() {
        assert_eq!(quant_scale(0.0f32, 127.0), 1.0);
        let mut w = vec![0.0f32; 3];
        fake_quantize(&mut w, 1.0, 127.0);
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn levels_for_eight_bits() {
        assert_eq!(QuantConfig { bits: 8, observer_epochs: 5 }.levels().unwrap(), 127.0);
        assert!(QuantConfig { bits: 1, observer_epochs: 5 }.levels().is_err());
    }
}
