//! Scalar abstraction shared by the estimator, the saliency math and the toy
//! model. Implemented for `f32`, `f64` and the double-double
//! [`TwoFloat`](twofloat::TwoFloat) used by the reference oracles.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumCast + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the target cannot represent
    /// finite `f64` values, which none of the implementors do.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal out of range")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn cast<S: Scalar>(self) -> S {
        S::lit(self.to_f64_lossy())
    }

    /// `1 / self` to full working precision.
    #[inline]
    fn precise_recip(self) -> Self {
        self.recip()
    }

    /// Round to nearest, ties to even.
    #[inline]
    fn round_even(self) -> Self {
        Self::lit(self.to_f64_lossy().round_ties_even())
    }
}

impl Scalar for f32 {
    #[inline]
    fn cast<S: Scalar>(self) -> S {
        S::lit(self as f64)
    }
}

impl Scalar for f64 {}

impl Scalar for twofloat::TwoFloat {
    /// `TwoFloat` division is only accurate to about one `f64` ulp; a Newton
    /// step `r + r(1 − x r)` restores double-double accuracy.
    fn precise_recip(self) -> Self {
        let r = self.recip();
        r + r * (<Self as num_traits::One>::one() - self * r)
    }

    fn cast<S: Scalar>(self) -> S {
        // keeps the low word when S is another double-double
        <S as NumCast>::from(self).expect("TwoFloat cast")
    }
}

/// Iterator sum without relying on `std::iter::Sum`.
#[inline]
pub fn sum<T: Scalar>(it: impl IntoIterator<Item = T>) -> T {
    it.into_iter().fold(T::zero(), |acc, x| acc + x)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Dot product with error-free transformations (Ogita, Rump and Oishi's
/// `Dot2`): about twice the working precision, then rounded once.
#[inline]
pub fn dot_compensated<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    let mut c = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let t = s + p;
        let z = t - s;
        let se = (s - (t - z)) + (p - z);
        s = t;
        c += pe + se;
    }
    s + c
}

pub fn to_vec<T: Scalar, S: Scalar>(v: &[T]) -> Vec<S> {
    v.iter().map(|&x| x.cast()).collect()
}
