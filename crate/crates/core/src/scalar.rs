//! The floating-point abstraction the numeric layer is written against.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable throughout the crate (`f32` or `f64`).
///
/// Transcendental helpers that `num_traits::Float` lacks (erf) are evaluated
/// in double precision and rounded back.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Significant decimal digits needed for a lossless text round trip.
    const ROUND_TRIP_DIGITS: usize;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn error_fn(self) -> Self;
}

impl Scalar for f64 {
    const ROUND_TRIP_DIGITS: usize = 17;

    #[inline]
    fn error_fn(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    const ROUND_TRIP_DIGITS: usize = 9;

    #[inline]
    fn error_fn(self) -> Self {
        libm::erff(self)
    }
}
