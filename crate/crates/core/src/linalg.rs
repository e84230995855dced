//! Small dense routines on row-major square matrices stored in flat slices.
//! Sizes here are at most a Fisher block (tens of rows) or an oracle problem.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// In-place lower Cholesky factor `A = L Lᵀ`. The strict upper triangle is
/// zeroed on success.
pub fn cholesky<T: Scalar>(a: &mut [T], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        let inv = ljj.precise_recip();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s * inv;
        }
        for i in 0..j {
            a[i * n + j] = T::zero();
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky`].
pub fn cholesky_solve<T: Scalar>(l: &[T], n: usize, b: &mut [T]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s * l[i * n + i].precise_recip();
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s * l[i * n + i].precise_recip();
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut l = a.to_vec();
    cholesky(&mut l, n)?;
    let mut inv = vec![T::zero(); n * n];
    let mut col = vec![T::zero(); n];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = T::zero());
        col[j] = T::one();
        cholesky_solve(&l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    symmetrize(&mut inv, n);
    Ok(inv)
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve<T: Scalar>(a: &[T], n: usize, b: &[T]) -> Result<Vec<T>> {
    let mut l = a.to_vec();
    cholesky(&mut l, n)?;
    let mut x = b.to_vec();
    cholesky_solve(&l, n, &mut x);
    Ok(x)
}

pub fn matvec<T: Scalar>(a: &[T], n: usize, x: &[T], out: &mut [T]) {
    for (row, o) in a.chunks_exact(n).zip(out.iter_mut()) {
        *o = crate::scalar::dot(row, x);
    }
}

/// `xᵀ A x`
pub fn quad_form<T: Scalar>(a: &[T], n: usize, x: &[T]) -> T {
    let mut ax = vec![T::zero(); n];
    matvec(a, n, x, &mut ax);
    crate::scalar::dot(x, &ax)
}

/// Replaces `A` with `(A + Aᵀ) / 2`.
pub fn symmetrize<T: Scalar>(a: &mut [T], n: usize) {
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[i * n + j] + a[j * n + i]) * half;
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
/// Only used for diagnostics and tests on small blocks.
pub fn min_eigenvalue(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * frobenius(&m).max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).fold(f64::INFINITY, f64::min)
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
