//! Block-diagonal inverse of the dampened empirical Fisher
//! `F = λI + (1/m) Σ gᵢ gᵢᵀ`, maintained one gradient at a time with the
//! Sherman-Morrison rank-1 recursion starting from `F⁻¹₀ = I/λ`.
//!
//! Coordinates are split into `ceil(d / B)` blocks of width `B`; the last
//! block is padded with phantom coordinates whose gradient is always zero, so
//! their rows stay at `I/λ` and they are never scored.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{dot, dot_compensated, Scalar};

pub const DEFAULT_BLOCK_SIZE: usize = 50;
pub const DEFAULT_NUM_GRADS: usize = 1024;
pub const DEFAULT_DAMPENING: f64 = 1e-7;

/// Below this many block entries per update the blocks are processed serially.
const PARALLEL_MIN_ENTRIES: usize = 1 << 15;

/// One loss gradient, flattened in prunable-weight order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample<T>(Vec<T>);

impl<T: Scalar> GradientSample<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInverse<T: Scalar = f64> {
    dim: usize,
    block_size: usize,
    n_blocks: usize,
    dampening: T,
    num_grads: usize,
    consumed: usize,
    /// `n_blocks` row-major `B×B` matrices back to back.
    blocks: Vec<T>,
}

impl<T: Scalar> FisherInverse<T> {
    pub fn new(dim: usize, block_size: usize, dampening: T, num_grads: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension { what: "d", value: dim });
        }
        if block_size == 0 {
            return Err(Error::InvalidDimension { what: "B", value: block_size });
        }
        if num_grads == 0 {
            return Err(Error::InvalidDimension { what: "m", value: num_grads });
        }
        if !(dampening > T::zero()) || !dampening.is_finite() {
            return Err(Error::InvalidDampening(dampening.to_f64_lossy()));
        }
        let n_blocks = dim.div_ceil(block_size);
        let mut est = Self {
            dim,
            block_size,
            n_blocks,
            dampening,
            num_grads,
            consumed: 0,
            blocks: vec![T::zero(); n_blocks * block_size * block_size],
        };
        est.reset();
        Ok(est)
    }

    /// Back to `I/λ` with no gradients consumed.
    pub fn reset(&mut self) {
        let b = self.block_size;
        let init = T::one() / self.dampening;
        self.blocks.iter_mut().for_each(|x| *x = T::zero());
        for block in self.blocks.chunks_exact_mut(b * b) {
            for i in 0..b {
                block[i * b + i] = init;
            }
        }
        self.consumed = 0;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn dampening(&self) -> T {
        self.dampening
    }

    pub fn num_grads(&self) -> usize {
        self.num_grads
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// All declared gradients have been applied.
    pub fn is_complete(&self) -> bool {
        self.consumed == self.num_grads
    }

    pub fn block(&self, b: usize) -> &[T] {
        let bb = self.block_size * self.block_size;
        &self.blocks[b * bb..(b + 1) * bb]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[T]> {
        self.blocks.chunks_exact(self.block_size * self.block_size)
    }

    /// Bytes held by the block storage.
    pub fn memory_bytes(&self) -> u64 {
        (self.blocks.len() * std::mem::size_of::<T>()) as u64
    }

    /// Applies one gradient:
    /// `F⁻¹ ← F⁻¹ − (F⁻¹g)(F⁻¹g)ᵀ / (m + gᵀF⁻¹g)` independently per block.
    pub fn update(&mut self, grad: &[T]) -> Result<()> {
        if grad.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: grad.len() });
        }
        if let Some(index) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        if self.consumed >= self.num_grads {
            return Err(Error::Capacity { capacity: self.num_grads });
        }
        let b = self.block_size;
        let m = T::lit(self.num_grads as f64);
        let dim = self.dim;
        let apply = |(k, block): (usize, &mut [T])| {
            let start = k * b;
            let end = (start + b).min(dim);
            rank_one_downdate(block, b, &grad[start..end], m);
        };
        if self.blocks.len() >= PARALLEL_MIN_ENTRIES {
            self.blocks.par_chunks_mut(b * b).enumerate().for_each(apply);
        } else {
            self.blocks.chunks_mut(b * b).enumerate().for_each(apply);
        }
        self.consumed += 1;
        Ok(())
    }

    pub fn update_sample(&mut self, sample: &GradientSample<T>) -> Result<()> {
        self.update(sample.values())
    }

    /// `[F⁻¹]ⱼⱼ` for every real coordinate.
    pub fn inverse_diagonal(&self) -> Vec<T> {
        let b = self.block_size;
        (0..self.dim).map(|j| self.block(j / b)[(j % b) * b + j % b]).collect()
    }

    /// `E_Q F⁻¹ E_Qᵀ` for the contiguous group `[offset, offset + size)`,
    /// which must lie inside one block.
    pub fn group_inverse_submatrix(&self, offset: usize, size: usize) -> Result<Vec<T>> {
        let b = self.block_size;
        if size == 0 || offset + size > self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: offset + size });
        }
        if offset / b != (offset + size - 1) / b {
            return Err(Error::Alignment { offset, size, boundary: b });
        }
        let block = self.block(offset / b);
        let base = offset % b;
        let mut sub = Vec::with_capacity(size * size);
        for i in 0..size {
            let row = (base + i) * b;
            sub.extend_from_slice(&block[row + base..row + base + size]);
        }
        Ok(sub)
    }

    /// Block-diagonal product `F⁻¹ v`.
    pub fn ihvp(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let b = self.block_size;
        let mut out = vec![T::zero(); self.dim];
        for (k, (vb, ob)) in v.chunks(b).zip(out.chunks_mut(b)).enumerate() {
            let block = self.block(k);
            for (i, o) in ob.iter_mut().enumerate() {
                *o = dot(&block[i * b..i * b + vb.len()], vb);
            }
        }
        Ok(out)
    }

    /// Column `j` of `F⁻¹` restricted to its block, as `(block_start, values)`.
    pub(crate) fn block_column(&self, j: usize) -> (usize, Vec<T>) {
        let b = self.block_size;
        let k = j / b;
        let start = k * b;
        let len = b.min(self.dim - start);
        let block = self.block(k);
        let c = j % b;
        (start, (0..len).map(|i| block[i * b + c]).collect())
    }

    /// Writes the binary checkpoint: `d, B` (u64), `λ` (f64), `m, consumed`
    /// (u64), then every block row-major as f64, all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.block_size as u64).to_le_bytes())?;
        w.write_all(&self.dampening.to_f64_lossy().to_le_bytes())?;
        w.write_all(&(self.num_grads as u64).to_le_bytes())?;
        w.write_all(&(self.consumed as u64).to_le_bytes())?;
        for x in &self.blocks {
            w.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        let block_size = u64::from_le_bytes(next(&mut r)?) as usize;
        let dampening = f64::from_le_bytes(next(&mut r)?);
        let num_grads = u64::from_le_bytes(next(&mut r)?) as usize;
        let consumed = u64::from_le_bytes(next(&mut r)?) as usize;
        let mut est = Self::new(dim, block_size, T::lit(dampening), num_grads)?;
        if consumed > num_grads {
            return Err(Error::Format(format!("consumed {consumed} exceeds m = {num_grads}")));
        }
        est.consumed = consumed;
        for x in est.blocks.iter_mut() {
            *x = T::lit(f64::from_le_bytes(next(&mut r)?));
        }
        Ok(est)
    }
}

/// Bytes needed for `ceil(d/B)` double-precision `B×B` blocks.
pub fn required_bytes(dim: u64, block_size: u64) -> u64 {
    dim.div_ceil(block_size) * block_size * block_size * std::mem::size_of::<f64>() as u64
}

fn rank_one_downdate<T: Scalar>(block: &mut [T], b: usize, g: &[T], m: T) {
    if g.iter().all(|x| x.is_zero()) {
        return;
    }
    let n = g.len();
    // u = F⁻¹ g; padded rows/cols see zero gradient entries and are skipped
    let u: Vec<T> = (0..n).map(|i| dot_compensated(&block[i * b..i * b + n], g)).collect();
    let denom = m + dot_compensated(g, &u);
    for i in 0..n {
        let ui = u[i];
        let row = &mut block[i * b..i * b + n];
        for (x, &uj) in row.iter_mut().zip(&u) {
            *x -= ui * uj / denom;
        }
    }
    crate::linalg::symmetrize(&mut block[..], b);
}
