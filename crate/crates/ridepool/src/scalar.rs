//! Floating-point abstraction the numeric core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type used for rewards, distances, network weights and metrics.
///
/// Implemented for `f32` and `f64`; the binaries and the default type
/// aliases at the crate root use `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + FromStr
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant or counter into the scalar type.
///
/// Panics only if the value class cannot be represented at all, which
/// cannot happen for finite inputs with `f32`/`f64`.
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 value representable in scalar type")
}

/// Converts an integer count into the scalar type.
pub fn count<T: Scalar>(v: usize) -> T {
    cast(v as f64)
}
