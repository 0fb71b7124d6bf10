//! Floating-point scalar abstraction for model arithmetic and KV storage.
//!
//! The toy decoder and the KV slots it produces are generic over [`Scalar`].
//! Importance scores are always `f64` regardless of the model scalar.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable for model weights, activations and cached keys/values.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in reports and trace tags.
    const NAME: &'static str;

    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn widen(self) -> f64;

    /// Narrowing conversion to `f32` for trace serialization.
    fn narrow(self) -> f32;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn widen(self) -> f64 {
                self as f64
            }

            #[inline]
            fn narrow(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");
