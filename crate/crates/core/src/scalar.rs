//! Scalar abstraction so the numeric core can run at f32 (pipeline) or f64
//! (finite-difference oracles).

use std::fmt::Debug;

/// Floating-point scalar for all numeric code in this crate: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + rustfft::FftNum
    + serde::Serialize
    + serde::de::DeserializeOwned
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn of_usize(x: usize) -> Self {
        Self::of_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
