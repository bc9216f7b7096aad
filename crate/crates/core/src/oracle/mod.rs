//! Independent reference implementations the simulator is checked against.
//!
//! Nothing here calls into the datapath: convolutions are plain nested loops,
//! batch norm is applied as written rather than folded, and connected
//! components come from a breadth-first flood fill.

mod cc;
mod forward;
mod report;

pub use cc::flood_fill_cc;
pub use forward::{reference_forward, reference_layers};
pub use report::{compare_runs, ErrorReport, TensorError};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("graph error: {0}")]
    Graph(String),
    #[error("shape error: {0}")]
    Shape(String),
}
