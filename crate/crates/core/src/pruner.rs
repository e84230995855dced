//! Gradual pruning engines: uniform per-layer magnitude pruning (GMP) and
//! global second-order pruning with compensation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherInverse;
use crate::saliency::{optimal_update, score_all, select_groups, GroupSpec, SaliencyReport};
use crate::scalar::Scalar;
use crate::store::Mask;

/// Cubic interpolation between `initial` and `target` sparsity over
/// `[start, end]` (in steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub initial: f64,
    pub target: f64,
    pub start: f64,
    pub end: f64,
}

impl SparsitySchedule {
    pub fn new(initial: f64, target: f64, start: f64, end: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&initial) || !(0.0..=1.0).contains(&target) || initial > target {
            return Err(Error::Schedule(format!("need 0 <= initial ({initial}) <= target ({target}) <= 1")));
        }
        if !(start < end) {
            return Err(Error::Schedule(format!("start {start} must precede end {end}")));
        }
        Ok(Self { initial, target, start, end })
    }

    pub fn sparsity_at(&self, t: f64) -> f64 {
        if t <= self.start {
            return self.initial;
        }
        if t >= self.end {
            return self.target;
        }
        let remaining = 1.0 - (t - self.start) / (self.end - self.start);
        self.target + (self.initial - self.target) * remaining.powi(3)
    }
}

/// Uniform magnitude pruning: each layer segment independently reaches
/// `target` by masking its smallest-magnitude surviving weights.
pub fn gmp_step<T: Scalar>(weights: &[T], mask: &Mask, target: f64) -> Result<Mask> {
    if weights.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: mask.len(), got: weights.len() });
    }
    let mut next = mask.clone();
    for seg in mask.layout().segments() {
        let already = seg.range().filter(|&i| !mask.is_kept(i)).count();
        let required = crate::saliency::groups_for_sparsity(target, seg.len);
        if required < already {
            return Err(Error::Monotonicity { current: mask.segment_sparsity(seg), target });
        }
        let mut alive: Vec<usize> = seg.range().filter(|&i| mask.is_kept(i)).collect();
        alive.sort_by(|&a, &b| {
            weights[a].abs().partial_cmp(&weights[b].abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in alive.iter().take(required - already) {
            next.prune(i);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct PruneOutcome<T> {
    pub mask: Mask,
    /// The update that was added to the weights (before re-masking).
    pub update: Vec<T>,
    pub report: SaliencyReport<f64>,
}

/// One global second-order pruning step. Scores all unpruned groups, prunes
/// the lowest-scoring ones up to `target`, adds the summed optimal update to
/// `weights` (when `compensate` is set) and re-zeros every masked coordinate.
/// The estimator is reset afterwards so the next step collects fresh
/// gradients.
pub fn oberts_step<T: Scalar>(
    weights: &mut [T],
    est: &mut FisherInverse<f64>,
    mask: &Mask,
    target: f64,
    spec: GroupSpec,
    compensate: bool,
) -> Result<PruneOutcome<T>> {
    if est.consumed() == 0 {
        return Err(Error::UninformedFisher);
    }
    if weights.len() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: weights.len() });
    }
    spec.validate(mask.layout(), est.block_size())?;
    let w64: Vec<f64> = crate::scalar::to_vec(weights);
    let scores = score_all(&w64, est, spec, mask)?;
    let groups = select_groups(&scores, mask, target, spec)?;
    let report = SaliencyReport::new(spec, scores).with_selection(groups);

    let mut next = mask.clone();
    for &g in &report.pruned_groups {
        spec.range(g).for_each(|i| next.prune(i));
    }
    let delta = if compensate && !report.pruned_groups.is_empty() {
        optimal_update(&w64, est, spec, &report.pruned_groups, mask)?
    } else {
        vec![0.0; weights.len()]
    };
    for (w, d) in weights.iter_mut().zip(&delta) {
        *w += T::lit(*d);
    }
    next.zero_pruned(weights);
    est.reset();
    Ok(PruneOutcome { mask: next, update: crate::scalar::to_vec(&delta), report })
}

/// `w ← M ⊙ w`
pub fn apply_mask<T: Scalar>(weights: &mut [T], mask: &Mask) -> Result<()> {
    if weights.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: mask.len(), got: weights.len() });
    }
    mask.zero_pruned(weights);
    Ok(())
}
