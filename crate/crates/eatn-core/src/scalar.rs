//! Scalar abstraction for all numeric code.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is any
//! IEEE float num-traits knows about plus infallible conversions to and from
//! `f64`. `f64` is the default compute type; `f32` is used for checkpoint
//! payloads and is available end-to-end for memory-constrained runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

pub trait Scalar:
    Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}
