//! Element abstraction over the two supported arithmetic widths.
//!
//! Training defaults to `f32` for speed; setting `PAL_TEST_MODE=1` switches
//! the whole pipeline to `f64`, which is what all determinism and gradient
//! acceptance checks run under. Everything numeric in [`crate::nn`],
//! [`crate::models`], [`crate::reweighting`] and [`crate::training`] is
//! generic over this trait.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Arithmetic width tag, carried by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element type usable by the network substrate.
pub trait Element:
    LinalgScalar + ScalarOperand + Float + Send + Sync + std::fmt::Debug + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    /// Integer-valued conversion used for mean denominators and similar.
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}
