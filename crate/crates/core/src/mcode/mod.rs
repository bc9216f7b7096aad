//! Microcode: the 256-bit word format, lowering from a [`ModelGraph`] to a
//! program with external-memory addresses, the program file, and a textual
//! assembler/disassembler.
//!
//! [`ModelGraph`]: crate::ir::ModelGraph

mod asm;
mod lower;
mod program;
mod word;

pub use asm::{assemble, disassemble, disassemble_words};
pub use lower::{lower, LowerOptions, ALIGN};
pub use program::{read_weight_image, write_weight_image, MicroProgram, Region, Section, TensorRef};
pub use word::*;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum McodeError {
    #[error("field {field} value {value} does not fit in {bits} bits")]
    Range { field: &'static str, value: u64, bits: u32 },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("allocation error: {0}")]
    Alloc(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed program: {0}")]
    Format(String),
    #[error("assembly error on line {line}: {msg}")]
    Asm { line: usize, msg: String },
    #[error(transparent)]
    Ir(#[from] crate::ir::IrError),
    #[error(transparent)]
    Datapath(#[from] crate::datapath::DatapathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
