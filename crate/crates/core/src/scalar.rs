//! Scalar abstraction shared by the vector math, sample matrices and linear maps.
//!
//! Storage is usually `f32`; accumulation always happens in `f64` regardless of
//! the element type, so `widen`/`narrow` are the only conversions the math needs.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for `f32` and `f64`.
    fn widen(self) -> f64;

    /// Round-to-nearest conversion from the accumulator type.
    fn narrow(value: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn widen(self) -> f64 {
        f64::from(self)
    }

    #[inline]
    fn narrow(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(value: f64) -> Self {
        value
    }
}

/// Inner product with 64-bit accumulation. Panics if lengths differ.
#[inline]
pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

#[inline]
pub fn l2_norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt()
}
