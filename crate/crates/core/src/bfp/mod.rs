//! Numeric formats of the datapath: binary16 storage, block floating-point
//! operands for the fixed-point MAC arrays, and the widened accumulator used
//! for partial sums.

mod accum;
mod block;
mod round;

pub use accum::{accum_add, truncate_to_half, ExtAccum, EXT_FRAC_BITS};
pub use block::{
    block_dot, block_dot_exact, dot_mantissas, normalize_block, normalize_into, BfpBlock,
    BfpConfig, BlockValue, ScaledInt,
};
pub use round::{exp2i, floor_log2, half_add, half_from_f64, half_ulp, round_to_grid};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BfpError {
    #[error("format error: {0}")]
    Format(String),
    #[error("accumulator overflow, saturated to {saturated:?}")]
    Overflow { saturated: ExtAccum },
    #[error("block length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid BFP configuration: {0}")]
    Config(String),
}
