//! Group saliency `ρ_Q = ½ w_Qᵀ (E_Q F⁻¹ E_Qᵀ)⁻¹ w_Q` and the matching
//! optimal compensation `δw* = −F⁻¹ E_Qᵀ (E_Q F⁻¹ E_Qᵀ)⁻¹ E_Q w`.
//!
//! Groups are contiguous, aligned runs of `size` weights. With a
//! block-diagonal `F⁻¹` the compensation for a group never leaves the Fisher
//! block that contains it.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fisher::FisherInverse;
use crate::linalg::{cholesky, cholesky_solve};
use crate::scalar::{dot, Scalar};
use crate::store::{Layout, Mask};

/// Shape of the weight groups pruned together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupSpec {
    size: usize,
}

impl GroupSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidDimension { what: "group size", value: size });
        }
        Ok(Self { size })
    }

    pub fn unstructured() -> Self {
        Self { size: 1 }
    }

    /// Contiguous blocks of four weights.
    pub fn block4() -> Self {
        Self { size: 4 }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_groups(&self, dim: usize) -> usize {
        dim / self.size
    }

    pub fn range(&self, group: usize) -> Range<usize> {
        group * self.size..(group + 1) * self.size
    }

    /// Checks that groups tile `layout` without crossing a segment or a Fisher
    /// block of width `block_size`.
    pub fn validate(&self, layout: &Layout, block_size: usize) -> Result<()> {
        if block_size % self.size != 0 {
            return Err(Error::Alignment { offset: 0, size: self.size, boundary: block_size });
        }
        for seg in layout.segments() {
            if seg.offset % self.size != 0 || seg.len % self.size != 0 {
                return Err(Error::Alignment { offset: seg.offset, size: self.size, boundary: seg.len });
            }
        }
        Ok(())
    }

    /// A group is pruned when any of its coordinates is masked.
    pub fn is_pruned(&self, mask: &Mask, group: usize) -> bool {
        self.range(group).any(|i| !mask.is_kept(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport<T> {
    pub group: GroupSpec,
    /// One score per group; `+∞` for groups that were already pruned.
    pub scores: Vec<T>,
    pub pruned_groups: Vec<usize>,
    pub predicted_loss_increase: T,
}

impl<T: Scalar> SaliencyReport<T> {
    pub fn new(group: GroupSpec, scores: Vec<T>) -> Self {
        Self { group, scores, pruned_groups: Vec::new(), predicted_loss_increase: T::zero() }
    }

    /// Records the selection and the summed predicted loss increase.
    pub fn with_selection(mut self, groups: Vec<usize>) -> Self {
        self.pruned_groups = groups;
        self.predicted_loss_increase = predicted_loss_increase(&self);
        self
    }

    /// CSV with columns `group_id,layer,offset,score,pruned_flag`.
    pub fn write_csv(&self, layout: &Layout, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group_id", "layer", "offset", "score", "pruned_flag"])?;
        let mut pruned = vec![false; self.scores.len()];
        for &g in &self.pruned_groups {
            pruned[g] = true;
        }
        for (g, score) in self.scores.iter().enumerate() {
            let offset = self.group.range(g).start;
            let layer = layout.segment_of(offset).map_or("", |s| s.name.as_str());
            out.write_record([
                g.to_string(),
                layer.to_string(),
                offset.to_string(),
                score.to_f64_lossy().to_string(),
                u8::from(pruned[g]).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `ρ_Q` for one group, or `+∞` when the group is already pruned.
pub fn score_group<T: Scalar>(
    weights: &[T],
    est: &FisherInverse<T>,
    spec: GroupSpec,
    group: usize,
    mask: &Mask,
) -> Result<T> {
    if spec.is_pruned(mask, group) {
        return Ok(T::infinity());
    }
    let q = spec.range(group);
    let mut sub = est.group_inverse_submatrix(q.start, spec.size)?;
    cholesky(&mut sub, spec.size).map_err(|_| Error::SingularGroup { group })?;
    let wq = &weights[q];
    let mut x = wq.to_vec();
    cholesky_solve(&sub, spec.size, &mut x);
    Ok(T::lit(0.5) * dot(wq, &x))
}

/// Scores every group of the prunable range.
pub fn score_all<T: Scalar>(weights: &[T], est: &FisherInverse<T>, spec: GroupSpec, mask: &Mask) -> Result<Vec<T>> {
    check_lengths(weights, est, mask)?;
    (0..spec.n_groups(est.dim()))
        .into_par_iter()
        .map(|g| score_group(weights, est, spec, g, mask))
        .collect()
}

/// Summed optimal update for pruning `groups` simultaneously, ignoring
/// correlations between groups. Coordinates masked in `mask` receive no
/// compensation.
pub fn optimal_update<T: Scalar>(
    weights: &[T],
    est: &FisherInverse<T>,
    spec: GroupSpec,
    groups: &[usize],
    mask: &Mask,
) -> Result<Vec<T>> {
    check_lengths(weights, est, mask)?;
    let n_groups = spec.n_groups(est.dim());
    let mut seen = vec![false; n_groups];
    for &g in groups {
        if g >= n_groups {
            return Err(Error::DimensionMismatch { expected: n_groups, got: g });
        }
        if std::mem::replace(&mut seen[g], true) {
            return Err(Error::GroupConflict { group: g });
        }
    }
    let mut delta = vec![T::zero(); est.dim()];
    for &g in groups {
        let q = spec.range(g);
        let mut sub = est.group_inverse_submatrix(q.start, spec.size)?;
        cholesky(&mut sub, spec.size).map_err(|_| Error::SingularGroup { group: g })?;
        let mut coeff = weights[q.clone()].to_vec();
        cholesky_solve(&sub, spec.size, &mut coeff);
        // δw = −F⁻¹[:, Q] · coeff, confined to the Fisher block
        for (k, &c) in q.clone().zip(&coeff) {
            let (start, col) = est.block_column(k);
            for (i, v) in col.into_iter().enumerate() {
                delta[start + i] -= v * c;
            }
        }
    }
    mask.zero_pruned(&mut delta);
    Ok(delta)
}

/// Picks the lowest-scoring unpruned groups needed to reach `target`
/// sparsity, ties broken by group index.
pub fn select_groups<T: Scalar>(scores: &[T], mask: &Mask, target: f64, spec: GroupSpec) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Schedule(format!("target sparsity {target} outside [0, 1]")));
    }
    let n_groups = scores.len();
    let already = (0..n_groups).filter(|&g| spec.is_pruned(mask, g)).count();
    let required = groups_for_sparsity(target, n_groups);
    if required < already {
        return Err(Error::Monotonicity { current: mask.sparsity(), target });
    }
    let mut candidates: Vec<usize> = (0..n_groups)
        .filter(|&g| !spec.is_pruned(mask, g) && scores[g].is_finite())
        .collect();
    candidates.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    candidates.truncate(required - already);
    candidates.sort_unstable();
    Ok(candidates)
}

/// `ceil(s · n)` with a small tolerance so that e.g. `0.9 · 20000` is 18000.
pub fn groups_for_sparsity(target: f64, n_groups: usize) -> usize {
    let exact = target * n_groups as f64;
    let rounded = exact.round();
    let count = if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) { rounded } else { exact.ceil() };
    (count as usize).min(n_groups)
}

/// Sum of `ρ_Q` over the selected groups.
pub fn predicted_loss_increase<T: Scalar>(report: &SaliencyReport<T>) -> T {
    report.pruned_groups.iter().fold(T::zero(), |acc, &g| acc + report.scores[g])
}

fn check_lengths<T: Scalar>(weights: &[T], est: &FisherInverse<T>, mask: &Mask) -> Result<()> {
    if weights.len() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: weights.len() });
    }
    if mask.len() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: mask.len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{quad_form, spd_inverse};
    use approx::assert_abs_diff_eq;

    fn dense(d: usize) -> Mask {
        Mask::dense(Layout::flat(d))
    }

    /// `F = I + g gᵀ` with `g = (1, 1)` is `[[2,1],[1,2]]`.
    fn anisotropic() -> FisherInverse<f64> {
        let mut est = FisherInverse::new(2, 2, 1.0, 1).unwrap();
        est.update(&[1.0, 1.0]).unwrap();
        est
    }

    #[test]
    fn identity_fisher_score() {
        let est = FisherInverse::new(2, 2, 1.0, 1).unwrap();
        let s = score_group(&[3.0, 4.0], &est, GroupSpec::new(2).unwrap(), 0, &dense(2)).unwrap();
        assert_abs_diff_eq!(s, 12.5, epsilon = 1e-12);
    }

    #[test]
    fn single_weight_score() {
        // [F⁻¹]₀₀ = 0.5 from λ = 1, m = 1, g = e₀
        let mut est = FisherInverse::new(2, 2, 1.0, 1).unwrap();
        est.update(&[1.0, 0.0]).unwrap();
        let s = score_group(&[2.0, 7.0], &est, GroupSpec::unstructured(), 0, &dense(2)).unwrap();
        assert_abs_diff_eq!(s, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_cost_nothing_and_pruned_are_sentinel() {
        let est = FisherInverse::new(4, 4, 1.0, 1).unwrap();
        let mut mask = dense(4);
        assert_eq!(score_group(&[0.0; 4], &est, GroupSpec::new(2).unwrap(), 0, &mask).unwrap(), 0.0);
        mask.prune(3);
        assert_eq!(score_group(&[1.0; 4], &est, GroupSpec::new(2).unwrap(), 1, &mask).unwrap(), f64::INFINITY);
    }

    #[test]
    fn fresh_estimator_gives_no_compensation() {
        let est = FisherInverse::new(4, 2, 0.5, 1).unwrap();
        let w = [1.0, -2.0, 3.0, 4.0];
        let d = optimal_update(&w, &est, GroupSpec::unstructured(), &[1], &dense(4)).unwrap();
        for (a, b) in d.iter().zip([0.0, 2.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_by_two_compensation() {
        let est = anisotropic();
        let w = [1.0, 1.0];
        let delta = optimal_update(&w, &est, GroupSpec::unstructured(), &[0], &dense(2)).unwrap();
        assert_abs_diff_eq!(delta[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(delta[1], 0.5, epsilon = 1e-12);

        let score = score_group(&w, &est, GroupSpec::unstructured(), 0, &dense(2)).unwrap();
        assert_abs_diff_eq!(score, 0.75, epsilon = 1e-12);
        let f = [2.0, 1.0, 1.0, 2.0];
        assert_abs_diff_eq!(0.5 * quad_form(&f, 2, &delta), 0.75, epsilon = 1e-12);
        let report = SaliencyReport::new(GroupSpec::unstructured(), vec![score, 9.0]).with_selection(vec![0]);
        assert_abs_diff_eq!(report.predicted_loss_increase, 0.75, epsilon = 1e-12);
        // the estimator really is [[2,1],[1,2]]⁻¹
        let inv = spd_inverse(&f, 2).unwrap();
        for (a, b) in est.block(0).iter().zip(inv) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pruning_a_whole_block_zeroes_it() {
        let mut est = FisherInverse::new(4, 4, 0.1, 2).unwrap();
        est.update(&[0.3, -0.1, 0.5, 0.2]).unwrap();
        est.update(&[-0.2, 0.4, 0.1, 0.3]).unwrap();
        let w = [1.0, 2.0, -1.0, 0.5];
        let d = optimal_update(&w, &est, GroupSpec::new(2).unwrap(), &[0, 1], &dense(4)).unwrap();
        // groups are solved independently, so only a re-mask makes this exact
        let mut after: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + b).collect();
        let mut mask = dense(4);
        (0..4).for_each(|i| mask.prune(i));
        mask.zero_pruned(&mut after);
        assert_eq!(after, vec![0.0; 4]);
    }

    #[test]
    fn overlapping_groups_conflict() {
        let est = FisherInverse::new(4, 2, 1.0, 1).unwrap();
        let r = optimal_update(&[1.0; 4], &est, GroupSpec::unstructured(), &[1, 1], &dense(4));
        assert!(matches!(r, Err(Error::GroupConflict { group: 1 })));
    }

    #[test]
    fn selection_examples() {
        let inf = f64::INFINITY;
        let mut mask = dense(4);
        mask.prune(3);
        let picked = select_groups(&[5.0, 1.0, 3.0, inf], &mask, 0.5, GroupSpec::unstructured()).unwrap();
        assert_eq!(picked, vec![1]);
        // target equal to current sparsity
        assert!(select_groups(&[5.0, 1.0, 3.0, inf], &mask, 0.25, GroupSpec::unstructured()).unwrap().is_empty());
        // ties
        let picked = select_groups(&[2.0, 2.0], &dense(8), 0.5, GroupSpec::block4()).unwrap();
        assert_eq!(picked, vec![0]);
        // monotonicity
        let mut m2 = dense(4);
        m2.prune(0);
        m2.prune(1);
        let err = select_groups(&[inf, inf, 1.0, 1.0], &m2, 0.25, GroupSpec::unstructured());
        assert!(matches!(err, Err(Error::Monotonicity { .. })));
    }

    #[test]
    fn ceil_is_tolerant_to_representation_error() {
        assert_eq!(groups_for_sparsity(0.9, 20000), 18000);
        assert_eq!(groups_for_sparsity(0.7, 10), 7);
        assert_eq!(groups_for_sparsity(0.71, 10), 8);
        assert_eq!(groups_for_sparsity(0.0, 10), 0);
        assert_eq!(groups_for_sparsity(1.0, 10), 10);
    }

    #[test]
    fn predicted_increase_of_empty_selection() {
        let report = SaliencyReport::new(GroupSpec::unstructured(), vec![1.0, 2.0]);
        assert_eq!(predicted_loss_increase(&report), 0.0);
        let two = report.with_selection(vec![0, 1]);
        assert_eq!(two.predicted_loss_increase, 3.0);
    }

    #[test]
    fn group_spec_validation() {
        let mut layout = Layout::new();
        layout.push("a", 8);
        layout.push("b", 6);
        assert!(GroupSpec::block4().validate(&layout, 8).is_err());
        assert!(GroupSpec::new(2).unwrap().validate(&layout, 8).is_ok());
        assert!(GroupSpec::new(3).unwrap().validate(&layout, 8).is_err());
    }

    #[test]
    fn csv_export() {
        let mut layout = Layout::new();
        layout.push("l0", 2);
        layout.push("l1", 2);
        let report = SaliencyReport::new(GroupSpec::unstructured(), vec![1.5, f64::INFINITY, 0.5, 2.0]).with_selection(vec![2]);
        let mut buf = Vec::new();
        report.write_csv(&layout, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "group_id,layer,offset,score,pruned_flag");
        assert_eq!(lines[2], "1,l0,1,inf,0");
        assert_eq!(lines[3], "2,l1,2,0.5,1");
    }
}
