//! Cross-entropy mixed with temperature-scaled distillation from a frozen
//! teacher.

use serde::{Deserialize, Serialize};

use super::data::{Batch, Dataset};
use super::model::{Cache, ToyModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::Mask;

/// `loss = (1−h)·CE + h·T²·KL(teacher_T ‖ student_T)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub hardness: f64,
    pub temperature: f64,
}

impl KdConfig {
    pub const DOWNSTREAM: KdConfig = KdConfig { hardness: 1.0, temperature: 2.0 };
    pub const UPSTREAM: KdConfig = KdConfig { hardness: 0.5, temperature: 2.0 };

    pub fn new(hardness: f64, temperature: f64) -> Result<Self> {
        let kd = Self { hardness, temperature };
        kd.validate()?;
        Ok(kd)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(Error::Shape(format!("hardness {} outside [0, 1]", self.hardness)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Shape(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// A distillation setting bound to its frozen teacher.
#[derive(Debug, Clone, Copy)]
pub struct Kd<'a, T> {
    pub config: KdConfig,
    pub teacher: &'a ToyModel<T>,
}

/// Row-wise softmax of `z / temperature`: `(probabilities, log-probabilities)`.
/// Probabilities are normalized directly rather than exponentiated from the
/// logs, which keeps them accurate in single precision.
fn softmax<T: Scalar>(z: &[T], classes: usize, temperature: T) -> (Vec<T>, Vec<T>) {
    let mut probs = Vec::with_capacity(z.len());
    let mut logs = Vec::with_capacity(z.len());
    for row in z.chunks_exact(classes) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
        let shifted: Vec<T> = row.iter().map(|&v| v / temperature - mx).collect();
        let e: Vec<T> = shifted.iter().map(|&s| s.exp()).collect();
        let total = e.iter().fold(T::zero(), |a, &b| a + b);
        let log_total = total.ln();
        probs.extend(e.iter().map(|&x| x / total));
        logs.extend(shifted.iter().map(|&s| s - log_total));
    }
    (probs, logs)
}

/// Batch-mean loss and its gradient w.r.t. the student logits.
pub fn mixed_loss<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
    teacher: Option<(&[T], KdConfig)>,
) -> (T, Vec<T>) {
    let n = labels.len();
    let inv_n = T::lit(1.0 / n as f64);
    let h = T::lit(teacher.map_or(0.0, |(_, kd)| kd.hardness));
    let hard = T::one() - h;
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];

    if hard > T::zero() {
        let (prob, logp) = softmax(logits, classes, T::one());
        for (s, &y) in labels.iter().enumerate() {
            loss -= hard * logp[s * classes + y] * inv_n;
            for c in 0..classes {
                let onehot = if c == y { T::one() } else { T::zero() };
                grad[s * classes + c] += hard * (prob[s * classes + c] - onehot) * inv_n;
            }
        }
    }
    if let Some((t_logits, kd)) = teacher.filter(|_| h > T::zero()) {
        let temp = T::lit(kd.temperature);
        let (q, logq) = softmax(logits, classes, temp);
        let (p, logp) = softmax(t_logits, classes, temp);
        for i in 0..logits.len() {
            loss += h * temp * temp * p[i] * (logp[i] - logq[i]) * inv_n;
            // d/dz of T²·KL is T·(q − p)
            grad[i] += h * temp * (q[i] - p[i]) * inv_n;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

impl<T: Scalar> ToyModel<T> {
    pub fn loss_and_grad(&self, batch: &Batch<T>, kd: Option<&Kd<T>>, mask: Option<&Mask>) -> Result<(T, Vec<T>)> {
        self.loss_and_grad_with(self.params(), batch, kd, mask)
    }

    /// Loss and full parameter gradient at `params`; the prunable part of the
    /// gradient is zeroed on masked coordinates.
    pub fn loss_and_grad_with(
        &self,
        params: &[T],
        batch: &Batch<T>,
        kd: Option<&Kd<T>>,
        mask: Option<&Mask>,
    ) -> Result<(T, Vec<T>)> {
        let n = batch.len();
        let mut caches: Vec<Cache<T>> = Vec::new();
        let logits = self.forward_with(params, &batch.x, n, Some(&mut caches))?;
        let t_logits = self.teacher_logits(batch, kd)?;
        let (loss, dlogits) =
            mixed_loss(&logits, &batch.y, self.classes(), t_logits.as_deref().zip(kd.map(|k| k.config)));
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch.id });
        }
        let mut grad = self.backward_with(params, &caches, dlogits, n);
        if let Some(mask) = mask {
            if mask.len() != self.dim() {
                return Err(Error::DimensionMismatch { expected: self.dim(), got: mask.len() });
            }
            mask.zero_pruned(&mut grad[..self.dim()]);
        }
        Ok((loss, grad))
    }

    /// Loss without the gradient.
    pub fn loss(&self, batch: &Batch<T>, kd: Option<&Kd<T>>) -> Result<T> {
        let logits = self.forward(&batch.x, batch.len())?;
        let t_logits = self.teacher_logits(batch, kd)?;
        Ok(mixed_loss(&logits, &batch.y, self.classes(), t_logits.as_deref().zip(kd.map(|k| k.config))).0)
    }

    fn teacher_logits(&self, batch: &Batch<T>, kd: Option<&Kd<T>>) -> Result<Option<Vec<T>>> {
        match kd {
            Some(kd) if kd.config.hardness > 0.0 => {
                if kd.teacher.classes() != self.classes() || kd.teacher.inputs() != self.inputs() {
                    return Err(Error::Shape("teacher and student disagree on inputs or classes".into()));
                }
                kd.teacher.forward(&batch.x, batch.len()).map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Plain cross-entropy and accuracy over a whole dataset.
    pub fn evaluate(&self, data: &Dataset<T>) -> Result<Metrics> {
        const CHUNK: usize = 512;
        let (mut loss, mut correct) = (0.0, 0usize);
        for start in (0..data.len()).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            let batch = data.gather(&rows, 0);
            let logits = self.forward(&batch.x, batch.len())?;
            let (_, logp) = softmax(&logits, self.classes(), T::one());
            for (s, &y) in batch.y.iter().enumerate() {
                let row = &logits[s * self.classes()..(s + 1) * self.classes()];
                let pred = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                correct += usize::from(pred == y);
                loss -= logp[s * self.classes() + y].to_f64_lossy();
            }
        }
        let n = data.len().max(1) as f64;
        Ok(Metrics { loss: loss / n, accuracy: correct as f64 / n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::{Activation, ModelConfig};
    use approx::assert_abs_diff_eq;

    fn setup() -> (ToyModel<f64>, ToyModel<f64>, Batch<f64>) {
        let c = ModelConfig { inputs: 3, hidden: vec![4], classes: 3, activation: Activation::Gelu, attention: None };
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        (ToyModel::new(&c, 1).unwrap(), ToyModel::new(&c, 2).unwrap(), Batch { id: 0, x, y: vec![0, 2, 1, 1] })
    }

    #[test]
    fn zero_hardness_is_cross_entropy() {
        let (student, teacher, batch) = setup();
        let kd = Kd { config: KdConfig::new(0.0, 2.0).unwrap(), teacher: &teacher };
        let plain = student.loss(&batch, None).unwrap();
        assert_eq!(student.loss(&batch, Some(&kd)).unwrap(), plain);
        let logits = student.forward(&batch.x, 4).unwrap();
        let manual: f64 = (0..4)
            .map(|s| {
                let row = &logits[s * 3..s * 3 + 3];
                row.iter().map(|z| z.exp()).sum::<f64>().ln() - row[batch.y[s]]
            })
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(plain, manual, epsilon = 1e-12);
    }

    #[test]
    fn self_distillation_costs_nothing() {
        let (student, _, batch) = setup();
        let kd = Kd { config: KdConfig::DOWNSTREAM, teacher: &student };
        let (loss, grad) = student.loss_and_grad(&batch, Some(&kd), None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn loss_is_affine_in_hardness() {
        let (student, teacher, batch) = setup();
        let at = |h: f64| student.loss(&batch, Some(&Kd { config: KdConfig::new(h, 2.0).unwrap(), teacher: &teacher })).unwrap();
        let (l0, l1) = (at(0.0), at(1.0));
        for h in [0.25, 0.5, 0.9] {
            assert_abs_diff_eq!(at(h), (1.0 - h) * l0 + h * l1, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(KdConfig::new(1.5, 2.0).is_err());
        assert!(KdConfig::new(0.5, 0.0).is_err());
    }
}
