//! The microcode interpreter: simulated external memory, row-band tiling of
//! convolutions through an on-chip buffer model, the residual cache, the
//! transposed path for wide images and the multi-image pipeline.

mod interp;
mod memory;
mod pipeline;

pub use interp::rows_per_round;
pub use memory::MemoryPool;
pub use pipeline::{pipeline_makespan, run_pipeline, ModuleWork, PipelineOutput};

use std::collections::BTreeMap;

use half::f16;
use thiserror::Error;

use crate::datapath::DatapathError;
use crate::mcode::MicroProgram;
use crate::tensor::Tensor;

use interp::Machine;

/// Environment variable overriding [`ExecConfig::mem_bytes`].
pub const MEM_ENV: &str = "FCNVM_MEM_BYTES";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("memory fault: {0}")]
    MemoryFault(String),
    #[error("cache fault: {0}")]
    CacheFault(String),
    #[error("rejected: {0}")]
    Reject(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bad program: {0}")]
    Program(String),
    #[error(transparent)]
    Datapath(#[from] DatapathError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecConfig {
    /// on-chip input buffer that one round's rows must fit in
    pub buffer_bytes: usize,
    pub width_limit: usize,
    /// extraction MAC array, input x output channels
    pub array_dims: (u32, u32),
    /// fusion and upsample MAC arrays
    pub fusion_dims: (u32, u32),
    pub clock_hz: f64,
    pub pipeline_depth: usize,
    pub mem_bytes: u64,
    pub zero_skip: bool,
    pub trace: bool,
    /// seed for randomized stage delays in [`run_pipeline`]
    pub fuzz_seed: Option<u64>,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            buffer_bytes: 2 << 20,
            width_limit: 4096,
            array_dims: (32, 64),
            fusion_dims: (16, 32),
            clock_hz: 320e6,
            pipeline_depth: 1,
            mem_bytes: 1 << 28,
            zero_skip: true,
            trace: false,
            fuzz_seed: None,
        }
    }
}

impl ExecConfig {
    /// Defaults with the memory capacity taken from `FCNVM_MEM_BYTES` when
    /// set.
    pub fn from_env() -> Result<Self, ExecError> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(MEM_ENV) {
            cfg.mem_bytes = v
                .trim()
                .parse()
                .map_err(|_| ExecError::Config(format!("{MEM_ENV}={v:?} is not a byte count")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        let bad = |m: String| Err(ExecError::Config(m));
        if self.array_dims.0 == 0 || self.array_dims.1 == 0 || self.fusion_dims.0 == 0 || self.fusion_dims.1 == 0 {
            return bad("array dimensions must be positive".into());
        }
        if !(self.clock_hz > 0.0) {
            return bad(format!("clock {} Hz", self.clock_hz));
        }
        if self.width_limit == 0 || self.width_limit > 1 << 15 {
            return bad(format!("width limit {} outside 1..=32768", self.width_limit));
        }
        if self.mem_bytes > 1 << 34 {
            return bad(format!("memory capacity {} exceeds the 34-bit address space", self.mem_bytes));
        }
        if self.pipeline_depth == 0 {
            return bad("pipeline depth must be at least 1".into());
        }
        Ok(())
    }
}

/// `M * N * clock` multiply-accumulates per second.
pub fn peak_macs(cfg: &ExecConfig) -> f64 {
    cfg.array_dims.0 as f64 * cfg.array_dims.1 as f64 * cfg.clock_hz
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PerfCounters {
    pub mac_ops: u64,
    pub transform_mults: u64,
    pub input_transform_mults: u64,
    pub input_transform_addsub: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub rounds: u64,
}

impl PerfCounters {
    pub fn summary(&self) -> String {
        format!(
            "macs={} transform_mults={} bytes_read={} bytes_written={} rounds={}",
            self.mac_ops, self.transform_mults, self.bytes_read, self.bytes_written, self.rounds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    /// named result maps in the caller's orientation
    pub outputs: BTreeMap<String, Tensor<f16>>,
    pub counters: PerfCounters,
    pub work: ModuleWork,
    /// one line per op when tracing
    pub trace: Vec<String>,
}

fn check_input(program: &MicroProgram, input: &Tensor<f16>) -> Result<(), ExecError> {
    let r = &program.input;
    let expect = if program.transposed {
        (r.channels as usize, r.width as usize, r.height as usize)
    } else {
        r.shape()
    };
    if input.shape() != expect {
        return Err(ExecError::Shape(format!(
            "program expects input {expect:?}, got {:?}",
            input.shape()
        )));
    }
    input
        .check_finite()
        .map_err(|e| ExecError::Shape(format!("input: {e}")))
}

/// Runs `program` on one image. Images wider than the width limit go
/// through the transposed path; images exceeding it in both dimensions are
/// rejected.
pub fn run_program(program: &MicroProgram, input: &Tensor<f16>, cfg: &ExecConfig) -> Result<RunOutput, ExecError> {
    run_with_pool(program, input, cfg).map(|(out, _)| out)
}

/// [`run_program`], also returning the final memory image.
pub fn run_with_pool(
    program: &MicroProgram,
    input: &Tensor<f16>,
    cfg: &ExecConfig,
) -> Result<(RunOutput, MemoryPool), ExecError> {
    cfg.validate()?;
    check_input(program, input)?;
    let (_, h, w) = input.shape();
    if h > cfg.width_limit && w > cfg.width_limit {
        return Err(ExecError::Reject(format!(
            "{h}x{w} exceeds the width limit {} in both dimensions",
            cfg.width_limit
        )));
    }
    let want_transposed = w > cfg.width_limit;
    if want_transposed == program.transposed {
        execute(program, input, cfg)
    } else {
        execute(&program.transposed(), input, cfg)
    }
}

/// Runs in transposed orientation regardless of the input width: the input
/// and every kernel are transposed, ops carry the transpose bit, and the
/// outputs are transposed back.
pub fn run_transposed(program: &MicroProgram, input: &Tensor<f16>, cfg: &ExecConfig) -> Result<RunOutput, ExecError> {
    cfg.validate()?;
    check_input(program, input)?;
    if input.height() > cfg.width_limit {
        return Err(ExecError::Reject(format!(
            "height {} exceeds the width limit {} and cannot be transposed",
            input.height(),
            cfg.width_limit
        )));
    }
    let p;
    let program = if program.transposed {
        program
    } else {
        p = program.transposed();
        &p
    };
    execute(program, input, cfg).map(|(out, _)| out)
}

fn execute(
    program: &MicroProgram,
    input: &Tensor<f16>,
    cfg: &ExecConfig,
) -> Result<(RunOutput, MemoryPool), ExecError> {
    let oriented;
    let input = if program.transposed {
        oriented = input.transpose_hw();
        &oriented
    } else {
        input
    };
    let mut m = Machine::new(program, cfg, input)?;
    for i in 0..program.len() {
        m.step(i)?;
    }
    m.finish()
}
