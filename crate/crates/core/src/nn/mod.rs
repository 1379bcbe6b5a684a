//! Minimal CPU tensor layers with explicit forward caches and backward passes.
//!
//! Every backward pass can return the gradient with respect to its input
//! without touching parameter gradients, which is what attribution and
//! climbing need. Parameter gradients are only accumulated when a
//! [`Gradients`] buffer is supplied.

mod layers;
mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward,
    relu, relu_backward, resize_nearest, resize_nearest_backward, split_channels, BatchNorm2d,
    BnCache, Conv2d, Linear, MaxPoolCache, Mode,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamKind, ParamStore};

/// Floating point element type accepted by the layers.
///
/// Production runs use `f32`; gradient checks run in `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
