use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used throughout the crate.
///
/// Everything numeric (tensors, models, paths, attributions) is generic over
/// this trait. `f64` is the working precision; `f32` is supported for
/// storage-constrained use but the completeness tolerances assume `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + LowerExp + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;

    /// Widening conversion used for serialization and reporting.
    fn as_f64(self) -> f64;

    fn half() -> Self {
        Self::of(0.5)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Converts a slice of scalars into `f64`s.
pub fn to_f64_vec<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.as_f64()).collect()
}

/// Converts a slice of `f64`s into scalars.
pub fn from_f64_vec<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&v| T::of(v)).collect()
}

/// Pairwise (cascade) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().fold(T::zero(), |acc, &v| acc + v);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn l2_norm<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}
