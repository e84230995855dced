//! Brute-force reference implementations. They share no code path with the
//! recursive estimator or the closed-form saliency: the Fisher is formed
//! densely and factorized, and the pruning problem is solved by eliminating
//! the constrained coordinates from `F` itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::fisher::FisherInverse;
use crate::linalg::{quad_form, spd_inverse, spd_solve};
use crate::saliency::{score_all, GroupSpec};
use crate::scalar::Scalar;
use crate::store::{Layout, Mask};

/// Largest dimension the dense oracles accept.
pub const MAX_ORACLE_DIM: usize = 512;

/// Dense block `λI + (1/m) Σ g_b g_bᵀ` for block `k` (padded coordinates
/// carry zero gradient).
pub fn dense_fisher_block<T: Scalar>(grads: &[Vec<T>], dampening: T, m: usize, block_size: usize, k: usize) -> Vec<T> {
    let b = block_size;
    let start = k * b;
    let inv_m = T::lit(m as f64).precise_recip();
    let mut f = vec![T::zero(); b * b];
    for i in 0..b {
        f[i * b + i] = dampening;
    }
    for g in grads {
        let slice: Vec<T> = (0..b).map(|i| g.get(start + i).copied().unwrap_or_else(T::zero)).collect();
        for i in 0..b {
            for j in 0..b {
                f[i * b + j] += slice[i] * slice[j] * inv_m;
            }
        }
    }
    f
}

/// Direct block-wise inverse of the dampened empirical Fisher.
pub fn oracle_dense_inverse<T: Scalar>(grads: &[Vec<T>], dampening: T, m: usize, block_size: usize, dim: usize) -> Result<Vec<Vec<T>>> {
    if dim > MAX_ORACLE_DIM {
        return Err(Error::InvalidDimension { what: "oracle d", value: dim });
    }
    if !(dampening > T::zero()) {
        return Err(Error::InvalidDampening(dampening.to_f64_lossy()));
    }
    if let Some(g) = grads.iter().find(|g| g.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: g.len() });
    }
    (0..dim.div_ceil(block_size))
        .map(|k| spd_inverse(&dense_fisher_block(grads, dampening, m, block_size, k), block_size))
        .collect()
}

/// Cost `½ δwᵀ F δw` of the best update that zeroes group `q`, found by
/// minimizing over the free coordinates: `F_RR x = F_RQ w_Q`.
pub fn constrained_cost(weights: &[f64], fisher: &[f64], dim: usize, q: std::ops::Range<usize>) -> Result<(f64, Vec<f64>)> {
    let free: Vec<usize> = (0..dim).filter(|i| !q.contains(i)).collect();
    let r = free.len();
    let mut delta = vec![0.0; dim];
    for i in q.clone() {
        delta[i] = -weights[i];
    }
    if r > 0 {
        let mut frr = vec![0.0; r * r];
        let mut rhs = vec![0.0; r];
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                frr[a * r + b] = fisher[i * dim + j];
            }
            rhs[a] = q.clone().map(|k| fisher[i * dim + k] * weights[k]).sum();
        }
        let x = spd_solve(&frr, r, &rhs)?;
        for (a, &i) in free.iter().enumerate() {
            delta[i] = x[a];
        }
    }
    Ok((0.5 * quad_form(fisher, dim, &delta), delta))
}

/// Exhaustive single-group search under a full Fisher: the group whose
/// optimal removal costs least, ties to the lowest index.
pub fn oracle_best_group(weights: &[f64], fisher: &[f64], group_size: usize) -> Result<usize> {
    let dim = weights.len();
    if dim > 16 {
        return Err(Error::InvalidDimension { what: "exhaustive oracle d", value: dim });
    }
    if group_size == 0 || dim % group_size != 0 {
        return Err(Error::InvalidDimension { what: "group size", value: group_size });
    }
    let mut best = (f64::INFINITY, 0);
    for g in 0..dim / group_size {
        let (cost, _) = constrained_cost(weights, fisher, dim, g * group_size..(g + 1) * group_size)?;
        if cost < best.0 {
            best = (cost, g);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_grads(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Recursive estimator vs. the dense inverse, evaluated in double-double so
/// that the reference itself carries no rounding error at f64 scale.
pub fn check_fisher(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let block_size = [2, 10, 50][rng.gen_range(0..3)];
        let dim = rng.gen_range(1..=MAX_ORACLE_DIM);
        let m = rng.gen_range(1..=128);
        let lambda = 10f64.powf(rng.gen_range(-7.0..-1.0));
        let grads = random_grads(&mut rng, m, dim);
        worst = worst.max(fisher_max_abs_error(&grads, lambda, m, block_size, dim)?);
    }
    Ok(OracleCheck { name: "fisher-vs-dense-inverse", cases, worst, tolerance: 1e-8, passed: worst <= 1e-8 })
}

/// Max elementwise `|WSM − dense|` over all blocks for one configuration.
pub fn fisher_max_abs_error(grads: &[Vec<f64>], lambda: f64, m: usize, block_size: usize, dim: usize) -> Result<f64> {
    let mut est = FisherInverse::new(dim, block_size, lambda, m)?;
    for g in grads {
        est.update(g)?;
    }
    let wide: Vec<Vec<TwoFloat>> = grads.iter().map(|g| g.iter().map(|&x| TwoFloat::from(x)).collect()).collect();
    let oracle = oracle_dense_inverse(&wide, TwoFloat::from(lambda), m, block_size, dim)?;
    let mut worst: f64 = 0.0;
    for (blk, reference) in est.blocks().zip(&oracle) {
        for (&x, &y) in blk.iter().zip(reference) {
            worst = worst.max((TwoFloat::from(x) - y).abs().to_f64_lossy());
        }
    }
    Ok(worst)
}

/// Saliency argmin vs. exhaustive constrained minimization with `B = d`.
pub fn check_best_group(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let (w, est, fisher, gs) = random_full_fisher_instance(&mut rng)?;
        let dim = w.len();
        let spec = GroupSpec::new(gs)?;
        let scores = score_all(&w, &est, spec, &Mask::dense(Layout::flat(dim)))?;
        let argmin = argmin_lowest_index(&scores);
        if argmin != oracle_best_group(&w, &fisher, gs)? {
            mismatches += 1;
        }
    }
    Ok(OracleCheck {
        name: "saliency-argmin-vs-exhaustive",
        cases,
        worst: mismatches as f64,
        tolerance: 0.0,
        passed: mismatches == 0,
    })
}

/// A random `(w, estimator, dense F, group size)` instance with `d ≤ 16`,
/// `B = d` and `|Q| ∈ {1, 2, 4}`.
pub fn random_full_fisher_instance(rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, FisherInverse<f64>, Vec<f64>, usize)> {
    let gs = [1, 2, 4][rng.gen_range(0..3)];
    let dim = gs * rng.gen_range(1..=16 / gs);
    let m = rng.gen_range(1..=2 * dim);
    let lambda = 10f64.powf(rng.gen_range(-3.0..0.0));
    let grads = random_grads(rng, m, dim);
    let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut est = FisherInverse::new(dim, dim, lambda, m)?;
    for g in &grads {
        est.update(g)?;
    }
    let fisher = dense_fisher_block(&grads, lambda, m, dim, 0);
    Ok((w, est, fisher, gs))
}

pub fn argmin_lowest_index(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}
