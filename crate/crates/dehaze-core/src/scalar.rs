//! Scalar abstraction so every numeric path runs in f32 or f64 unchanged.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Floating-point element type for images, tensors and parameters.
///
/// Training uses f32; gradient checks and metric math re-run the same code in
/// f64. The two conversion methods are total (never `Option`), which keeps
/// arithmetic helpers terse inside hot loops.
pub trait Scalar:
    Float
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Stable on-disk tag for serialized parameter containers.
    fn dtype_name() -> &'static str;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn dtype_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn dtype_name() -> &'static str {
        "f64"
    }
}
