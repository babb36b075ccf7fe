//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + NumCast + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite literal")
    }

    /// Lossless-enough view as `f64` for reporting and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }

    /// Rescales a tolerance stated for `f64` to this type's precision.
    ///
    /// Tolerances in this crate are quoted for double precision. For `f32`
    /// they are widened by the ratio of machine epsilons.
    #[inline]
    fn tol(t: f64) -> Self {
        let ratio = Self::epsilon().as_f64() / f64::EPSILON;
        Self::lit(t * ratio.max(1.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Deterministic pairwise (tree) summation.
///
/// The result depends only on the order of `values`, never on thread
/// scheduling, so it is used for every reduction across cells or atoms.
pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n if n <= 8 => values.iter().fold(T::zero(), |acc, &v| acc + v),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}
