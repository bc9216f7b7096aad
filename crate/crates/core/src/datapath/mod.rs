//! Layer kernels dispatched by the executor.
//!
//! The quantized kernels take binary16 tensors, normalize operands to block
//! floating-point, multiply mantissas in integers and accumulate partial sums
//! in [`ExtAccum`](crate::bfp::ExtAccum). The `float` kernels run the same
//! structure unquantized at `f32` or `f64`.

mod conv;
mod elementwise;
mod float;
mod pool;
mod upsample;
pub mod winograd;

pub use conv::{
    accumulate_direct, accumulate_winograd, conv_direct, conv_winograd, ConvWeights, PartialSums, RowBand,
    WeightLayout,
};
pub use elementwise::{relu, residual_add, sigmoid, sigmoid_scalar};
pub use float::{conv_direct_float, conv_winograd_float, FloatConv};
pub use pool::max_pool;
pub use upsample::{upsample2x, UpsampleMode};

use half::f16;
use thiserror::Error;

use crate::bfp::BfpError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatapathError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("row band error: {0}")]
    Band(String),
    #[error(transparent)]
    Bfp(#[from] BfpError),
}

/// Operation counts accumulated by the kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// multiply-accumulates issued to the MAC arrays
    pub mac_ops: u64,
    /// transform-domain elementwise products (Winograd only)
    pub transform_mults: u64,
    /// generic multiplications spent in input transforms
    pub input_transform_mults: u64,
    pub input_transform_addsub: u64,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.mac_ops += other.mac_ops;
        self.transform_mults += other.transform_mults;
        self.input_transform_mults += other.input_transform_mults;
        self.input_transform_addsub += other.input_transform_addsub;
    }
}

#[inline]
pub(crate) fn relu_half(v: f16, on: bool) -> f16 {
    if on && !(v > f16::ZERO) {
        f16::ZERO
    } else {
        v
    }
}
