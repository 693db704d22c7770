//! Floating-point scalar abstraction.
//!
//! All numeric code is generic over [`Scalar`] so the same kernels and
//! model math run at f32 (the production precision, used for training,
//! checkpoints, and evaluation) and at f64 (used by gradient oracles,
//! where finite differences need more headroom than f32 provides).

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lowering an f64 literal into the working scalar type.
#[inline]
pub fn fp<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 literal representable in scalar type")
}
