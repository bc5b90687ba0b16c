//! The scalar abstraction that makes the numeric core generic over precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors and everything built on them.
///
/// The library trains in `f32` and gradient-checks in `f64`; any type that
/// satisfies these bounds works. The bounds are the union of what the kernels
/// (`Float`, `NumAssignOps`, `Sum`), the serializers (`Debug`, `Display`), and
/// the thread-parallel engine (`Send + Sync + 'static`) need.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Converts to `f64` exactly (every supported scalar embeds in f64).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Scalar embeds in f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
