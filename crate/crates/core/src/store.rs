//! Flat prunable-weight layout and the cumulative pruning mask.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Named, contiguous partition of the prunable weights `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// A single segment covering `d` weights.
    pub fn flat(d: usize) -> Self {
        let mut l = Self::new();
        l.push("weights", d);
        l
    }

    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let offset = self.len();
        self.segments.push(Segment { name: name.into(), offset, len });
        offset..offset + len
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_of(&self, index: usize) -> Option<&Segment> {
        let pos = self.segments.partition_point(|s| s.offset + s.len <= index);
        self.segments.get(pos).filter(|s| s.range().contains(&index))
    }
}

/// Cumulative keep-mask over the prunable weights: `true` = kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    keep: Vec<bool>,
    layout: Layout,
}

impl Mask {
    pub fn dense(layout: Layout) -> Self {
        Self { keep: vec![true; layout.len()], layout }
    }

    pub fn from_bits(layout: Layout, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), got: keep.len() });
        }
        Ok(Self { keep, layout })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn prune(&mut self, i: usize) {
        self.keep[i] = false;
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.keep.len() as f64
    }

    pub fn segment_sparsity(&self, seg: &Segment) -> f64 {
        if seg.len == 0 {
            return 0.0;
        }
        self.keep[seg.range()].iter().filter(|&&k| !k).count() as f64 / seg.len as f64
    }

    /// Every coordinate pruned in `self` is also pruned in `later`.
    pub fn is_superset_of(&self, later: &Mask) -> bool {
        self.keep.len() == later.keep.len()
            && self.keep.iter().zip(&later.keep).all(|(&a, &b)| a || !b)
    }

    pub fn zero_pruned<T: Scalar>(&self, values: &mut [T]) {
        for (v, &k) in values.iter_mut().zip(&self.keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_lookup() {
        let mut l = Layout::new();
        l.push("a", 3);
        l.push("b", 0);
        l.push("c", 2);
        assert_eq!(l.len(), 5);
        assert_eq!(l.segment_of(0).unwrap().name, "a");
        assert_eq!(l.segment_of(3).unwrap().name, "c");
        assert!(l.segment_of(5).is_none());
    }

    #[test]
    fn sparsity_counts_pruned() {
        let mut m = Mask::dense(Layout::flat(4));
        assert_eq!(m.sparsity(), 0.0);
        m.prune(2);
        assert_eq!(m.sparsity(), 0.25);
        let dense = Mask::dense(Layout::flat(4));
        assert!(dense.is_superset_of(&m));
        assert!(!m.is_superset_of(&dense));
    }
}
