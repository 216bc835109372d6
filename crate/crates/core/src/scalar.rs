//! Scalar abstraction shared by every module.
//!
//! All algorithms are written against [`Real`], so they run on `f32` and
//! `f64` storage alike. Reduced-precision semantics come from
//! [`crate::precision`], which rounds through `f64` regardless of `T`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// A binary floating-point storage type (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (round-to-nearest for `f32`).
    fn of(x: f64) -> Self;

    /// Exact widening to `f64`.
    fn f64(self) -> f64;

    /// Number of significand bits of the storage type, implicit bit included.
    const MANTISSA_BITS: u32;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    const MANTISSA_BITS: u32 = 24;
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    const MANTISSA_BITS: u32 = 53;
}
