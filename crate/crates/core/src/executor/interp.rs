use std::collections::BTreeMap;

use half::f16;

use crate::datapath::{
    accumulate_direct, accumulate_winograd, max_pool, residual_add, sigmoid, upsample2x, ConvWeights, OpCounters,
    PartialSums, RowBand, UpsampleMode, WeightLayout,
};
use crate::mcode::{MicroOp, Section, OP_CONV, OP_NULL, OP_POOL, OP_UPSAMPLE, RES_ADD, RES_CACHE, UPSAMPLE_NEAREST};
use crate::tensor::Tensor;

use super::memory::MemoryPool;
use super::pipeline::{Module, ModuleWork};
use super::{ExecConfig, ExecError, PerfCounters, RunOutput};

/// Largest multiple of 4 output rows whose input rows (halo included) fit
/// the buffer for one channel block, capped at the rounded-up map height.
pub fn rows_per_round(
    h_in: usize,
    h_out: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    block_channels: usize,
    buffer_bytes: usize,
) -> Result<usize, ExecError> {
    let rows_in = |r: usize| ((r - 1) * stride + kernel).min(h_in);
    let bytes = |r: usize| rows_in(r) * width * block_channels * 2;
    if bytes(4) > buffer_bytes {
        return Err(ExecError::Config(format!(
            "buffer of {buffer_bytes} bytes cannot hold {} rows of {width}x{block_channels}",
            rows_in(4)
        )));
    }
    let cap = h_out.div_ceil(4) * 4;
    let mut r = 4;
    while r + 4 <= cap && bytes(r + 4) <= buffer_bytes {
        r += 4;
    }
    Ok(r)
}

/// State of one image moving through a program.
pub(crate) struct Machine<'a> {
    program: &'a crate::mcode::MicroProgram,
    cfg: &'a ExecConfig,
    pool: MemoryPool,
    cache: Option<Tensor<f16>>,
    counters: PerfCounters,
    work: ModuleWork,
    trace: Vec<String>,
}

impl<'a> Machine<'a> {
    pub fn new(program: &'a crate::mcode::MicroProgram, cfg: &'a ExecConfig, input: &Tensor<f16>) -> Result<Self, ExecError> {
        let mut pool = MemoryPool::new(cfg.mem_bytes);
        pool.claim(program.input.addr, program.input.bytes(), crate::ir::INPUT_ID)?;
        pool.write_tensor(program.input.addr, input)?;
        Ok(Self {
            program,
            cfg,
            pool,
            cache: None,
            counters: PerfCounters::default(),
            work: ModuleWork::default(),
            trace: Vec::new(),
        })
    }

    pub fn op(&self, index: usize) -> (Section, &'a MicroOp) {
        let n = self.program.extraction.len();
        if index < n {
            (Section::Extraction, &self.program.extraction[index])
        } else {
            (Section::Fusion, &self.program.fusion[index - n])
        }
    }

    pub fn module(&self, index: usize) -> Module {
        match self.op(index) {
            (Section::Extraction, _) => Module::Extraction,
            (Section::Fusion, op) if op.layer_type == OP_UPSAMPLE => Module::Upsample,
            _ => Module::Fusion,
        }
    }

    pub fn step(&mut self, index: usize) -> Result<(), ExecError> {
        let (section, op) = self.op(index);
        let id = self
            .program
            .layer_ids
            .get(index)
            .ok_or_else(|| ExecError::Program(format!("op {index} has no layer id")))?;
        let before = self.counters;
        if op.width as usize > self.cfg.width_limit {
            return Err(ExecError::Reject(format!(
                "op {index} ({id}) is {} wide, limit {}",
                op.width, self.cfg.width_limit
            )));
        }
        let in_shape = (op.in_channels as usize, op.height as usize, op.width as usize);
        let output = match (op.layer_type, section) {
            (OP_NULL, _) => {
                if op.res_op == RES_ADD {
                    return Err(ExecError::Program(format!("null op {index} ({id}) cannot add the cache")));
                }
                None
            }
            (OP_CONV, _) => Some(self.conv(op, id)?),
            (OP_POOL, Section::Extraction) => {
                let k = match op.kernel_size() {
                    k @ (2 | 3) => k,
                    k => return Err(ExecError::Program(format!("max pool {id} with kernel {k}"))),
                };
                let x = self.load(op.in_addr, in_shape)?;
                Some(self.store(op, id, max_pool(&x, k)?)?)
            }
            (OP_POOL, Section::Fusion) => {
                let x = self.load(op.in_addr, in_shape)?;
                Some(self.store(op, id, sigmoid(&x))?)
            }
            _ => {
                let x = self.load(op.in_addr, in_shape)?;
                let mode = if op.kernel_code == UPSAMPLE_NEAREST {
                    UpsampleMode::Nearest
                } else {
                    UpsampleMode::Bilinear
                };
                let mut oc = OpCounters::default();
                let y = upsample2x(&x, mode, self.cfg.zero_skip, &mut oc);
                self.counters.mac_ops += oc.mac_ops;
                Some(self.store(op, id, y)?)
            }
        };
        if op.res_op == RES_CACHE {
            if self.cache.is_some() {
                return Err(ExecError::CacheFault(format!(
                    "op {index} ({id}) caches while another cached result is pending"
                )));
            }
            let snapshot = match output {
                Some(t) => t,
                None => self.load(op.in_addr, in_shape)?,
            };
            self.cache = Some(snapshot);
        }

        let d_macs = self.counters.mac_ops - before.mac_ops;
        let elems = (op.in_channels as u64) * op.height as u64 * op.width as u64;
        let cost = if op.layer_type == OP_CONV || op.layer_type == OP_UPSAMPLE { d_macs } else { elems };
        match self.module(index) {
            Module::Extraction => self.work.extraction += cost,
            Module::Fusion => self.work.fusion += cost,
            Module::Upsample => self.work.upsample += cost,
        }
        if self.cfg.trace {
            let c = &self.counters;
            self.trace.push(format!(
                "{index:4} {:<10} {:<12} type={} k={} s={} relu={} t={} res={} c={}->{} hw={}x{} in={:#x} out={:#x} macs={} rounds={} rd={} wr={}",
                match section {
                    Section::Extraction => "extraction",
                    Section::Fusion => "fusion",
                },
                id,
                op.layer_type,
                op.kernel_code,
                op.stride(),
                op.relu() as u8,
                op.transpose() as u8,
                op.res_op,
                op.in_channels,
                op.out_channels,
                op.height,
                op.width,
                op.in_addr,
                op.out_addr,
                d_macs,
                c.rounds - before.rounds,
                c.bytes_read - before.bytes_read,
                c.bytes_written - before.bytes_written,
            ));
        }
        Ok(())
    }

    fn load(&mut self, addr: u64, shape: (usize, usize, usize)) -> Result<Tensor<f16>, ExecError> {
        let t = self.pool.read_tensor(addr, shape)?;
        self.counters.bytes_read += 2 * t.data().len() as u64;
        Ok(t)
    }

    /// Writes a whole-map result (one round).
    fn store(&mut self, op: &MicroOp, id: &str, t: Tensor<f16>) -> Result<Tensor<f16>, ExecError> {
        self.pool.claim(op.out_addr, 2 * t.data().len() as u64, id)?;
        self.pool.write_tensor(op.out_addr, &t)?;
        self.counters.bytes_written += 2 * t.data().len() as u64;
        self.counters.rounds += 1;
        Ok(t)
    }

    fn conv(&mut self, op: &MicroOp, id: &str) -> Result<Tensor<f16>, ExecError> {
        let w: &ConvWeights = self
            .program
            .weights
            .get(id)
            .ok_or_else(|| ExecError::Program(format!("no weights for conv {id:?}")))?;
        let (k, s) = (op.kernel_size(), op.stride());
        let winograd = match w.layout() {
            WeightLayout::Winograd if k == 3 && s == 1 => true,
            WeightLayout::Direct { kernel } if kernel == k => false,
            layout => {
                return Err(ExecError::Program(format!(
                    "conv {id:?}: {layout:?} weights for a {k}x{k} stride-{s} op"
                )))
            }
        };
        if (w.in_ch(), w.out_ch()) != (op.in_channels as usize, op.out_channels as usize) {
            return Err(ExecError::Program(format!(
                "conv {id:?}: weights are {}->{}, op is {}->{}",
                w.in_ch(),
                w.out_ch(),
                op.in_channels,
                op.out_channels
            )));
        }
        let (c_in, h, wd) = (op.in_channels as usize, op.height as usize, op.width as usize);
        let (oh, ow) = (h.div_ceil(s), wd.div_ceil(s));
        let c_out = w.out_ch();
        let out_shape = (c_out, oh, ow);
        let adding = op.res_op == RES_ADD;
        let cached = if adding {
            let c = self
                .cache
                .take()
                .ok_or_else(|| ExecError::CacheFault(format!("conv {id:?} adds an empty cache")))?;
            if c.shape() != out_shape {
                return Err(ExecError::CacheFault(format!(
                    "conv {id:?} produces {out_shape:?}, cached result is {:?}",
                    c.shape()
                )));
            }
            Some(c)
        } else {
            None
        };
        self.pool.claim(op.out_addr, 2 * (c_out * oh * ow) as u64, id)?;

        let n = w.config().block_size;
        let rows = rows_per_round(h, oh, wd, k, s, n.min(c_in), self.cfg.buffer_bytes)?;
        let pad = k / 2;
        let mut full = if op.res_op == RES_CACHE { Some(vec![f16::ZERO; c_out * oh * ow]) } else { None };
        let mut oc = OpCounters::default();
        for r0 in (0..oh).step_by(rows) {
            let r1 = (r0 + rows).min(oh);
            let lo = (r0 * s).saturating_sub(pad);
            let hi = ((r1 - 1) * s + k - pad).min(h);
            let mut sums = PartialSums::new(c_out, r0..r1, ow);
            for b in 0..w.blocks() {
                let ch = b * n..((b + 1) * n).min(c_in);
                let data = self.pool.read_rows(op.in_addr, (c_in, h, wd), ch.clone(), lo..hi)?;
                self.counters.bytes_read += 2 * data.len() as u64;
                self.counters.rounds += 1;
                let band = RowBand::new(ch, lo..hi, h, wd, data);
                if winograd {
                    accumulate_winograd(w, &band, op.transpose(), &mut sums, &mut oc)?;
                } else {
                    accumulate_direct(w, &band, s, op.transpose(), &mut sums, &mut oc)?;
                }
            }
            let mut rows_out = sums.finish(w.bias(), op.relu() && !adding);
            if let Some(c) = &cached {
                let part = Tensor::from_vec(c_out, r1 - r0, ow, rows_out).expect("sizes match");
                let cache_rows = Tensor::from_fn(c_out, r1 - r0, ow, |o, y, x| c.at(o, r0 + y, x));
                rows_out = residual_add(&part, &cache_rows, op.relu())?.into_vec();
            }
            self.pool.write_rows(op.out_addr, out_shape, r0..r1, &rows_out)?;
            self.counters.bytes_written += 2 * rows_out.len() as u64;
            if let Some(f) = &mut full {
                let per = (r1 - r0) * ow;
                for o in 0..c_out {
                    f[(o * oh + r0) * ow..(o * oh + r1) * ow].copy_from_slice(&rows_out[o * per..(o + 1) * per]);
                }
            }
        }
        self.counters.mac_ops += oc.mac_ops;
        self.counters.transform_mults += oc.transform_mults;
        self.counters.input_transform_mults += oc.input_transform_mults;
        self.counters.input_transform_addsub += oc.input_transform_addsub;
        Ok(match full {
            Some(f) => Tensor::from_vec(c_out, oh, ow, f).expect("sizes match"),
            // only cached results need the assembled map
            None => Tensor::zeros(1, 1, 1),
        })
    }

    pub fn finish(self) -> Result<(RunOutput, MemoryPool), ExecError> {
        let mut outputs = BTreeMap::new();
        for (name, r) in &self.program.outputs {
            let t = self.pool.read_tensor(r.addr, r.shape())?;
            outputs.insert(name.clone(), if self.program.transposed { t.transpose_hw() } else { t });
        }
        Ok((
            RunOutput {
                outputs,
                counters: self.counters,
                work: self.work,
                trace: self.trace,
            },
            self.pool,
        ))
    }
}
