//! Multi-image execution with the extraction, fusion and upsample modules
//! running as independent workers.
//!
//! Each in-flight image is driven by its own thread that walks the program
//! and hands every op to the worker of the module that executes it. Images
//! own their memory pools; the program is shared read-only. Optional seeded
//! delays in the workers perturb the interleaving.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Duration;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mcode::MicroProgram;
use crate::tensor::Tensor;

use super::interp::Machine;
use super::{run_program, ExecConfig, ExecError, RunOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Extraction,
    Fusion,
    Upsample,
}

/// Work per module for one image, in multiply-accumulates (element count
/// for ops without MACs).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModuleWork {
    pub extraction: u64,
    pub fusion: u64,
    pub upsample: u64,
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// one result per input, in input order
    pub results: Vec<Result<RunOutput, ExecError>>,
    /// analytic completion time of the stream, in cycles
    pub makespan_cycles: f64,
    /// analytic images per second at the configured clock
    pub throughput: f64,
}

type Task<'a> = Box<dyn FnOnce() -> Machine<'a> + Send + 'a>;

pub fn run_pipeline(program: &MicroProgram, inputs: &[Tensor<f16>], cfg: &ExecConfig) -> PipelineOutput {
    let results = if let Err(e) = cfg.validate() {
        inputs.iter().map(|_| Err(e.clone())).collect()
    } else if cfg.pipeline_depth == 1 && cfg.fuzz_seed.is_none() {
        inputs.iter().map(|x| run_program(program, x, cfg)).collect()
    } else {
        run_concurrent(program, inputs, cfg)
    };
    let work: Vec<ModuleWork> = results
        .iter()
        .map(|r| r.as_ref().map(|o| o.work).unwrap_or_default())
        .collect();
    let makespan = pipeline_makespan(&work, cfg);
    let throughput = if makespan > 0.0 {
        inputs.len() as f64 * cfg.clock_hz / makespan
    } else {
        0.0
    };
    PipelineOutput {
        results,
        makespan_cycles: makespan,
        throughput,
    }
}

fn run_concurrent(program: &MicroProgram, inputs: &[Tensor<f16>], cfg: &ExecConfig) -> Vec<Result<RunOutput, ExecError>> {
    let slots: Mutex<Vec<Option<Result<RunOutput, ExecError>>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        let mut senders = Vec::new();
        for m in 0..3u64 {
            let (tx, rx) = mpsc::channel::<(Task, mpsc::Sender<Machine>)>();
            senders.push(tx);
            let mut rng = cfg.fuzz_seed.map(|seed| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(m)));
            s.spawn(move || {
                for (task, reply) in rx {
                    if let Some(rng) = &mut rng {
                        std::thread::sleep(Duration::from_micros(rng.gen_range(0..300)));
                    }
                    // the driver waits on the reply, so a send failure
                    // means it is gone and the result is moot
                    let _ = reply.send(task());
                }
            });
        }
        for _ in 0..cfg.pipeline_depth.min(inputs.len()) {
            let senders = senders.clone();
            let (slots, next) = (&slots, &next);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= inputs.len() {
                    break;
                }
                let r = drive(program, &inputs[i], cfg, &senders);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
        drop(senders);
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every image ran")).collect()
}

fn drive<'a>(
    program: &'a MicroProgram,
    input: &Tensor<f16>,
    cfg: &'a ExecConfig,
    modules: &[mpsc::Sender<(Task<'a>, mpsc::Sender<Machine<'a>>)>],
) -> Result<RunOutput, ExecError> {
    // orientation and shape checks are the same as for a single run
    let (_, h, w) = input.shape();
    if h > cfg.width_limit && w > cfg.width_limit {
        return Err(ExecError::Reject(format!(
            "{h}x{w} exceeds the width limit {} in both dimensions",
            cfg.width_limit
        )));
    }
    super::check_input(program, input)?;
    if (w > cfg.width_limit) != program.transposed {
        // rare: fall back to a single-threaded run in the other orientation
        return run_program(program, input, cfg);
    }
    let oriented;
    let input = if program.transposed {
        oriented = input.transpose_hw();
        &oriented
    } else {
        input
    };
    let mut machine = Machine::new(program, cfg, input)?;
    let (reply_tx, reply_rx) = mpsc::channel();
    for i in 0..program.len() {
        let module = machine.module(i) as usize;
        let result: std::sync::Arc<Mutex<Option<Result<(), ExecError>>>> = Default::default();
        let slot = result.clone();
        let task: Task<'a> = Box::new(move || {
            let mut m = machine;
            *slot.lock().unwrap() = Some(m.step(i));
            m
        });
        modules[module]
            .send((task, reply_tx.clone()))
            .map_err(|_| ExecError::Config("module worker stopped".into()))?;
        machine = reply_rx
            .recv()
            .map_err(|_| ExecError::Config("module worker stopped".into()))?;
        let r = result.lock().unwrap().take().expect("task ran");
        r?;
    }
    machine.finish().map(|(out, _)| out)
}

/// Completion time of a stream under the three-module pipeline with at most
/// `pipeline_depth` images in flight.
///
/// Image `i` runs extraction, then fusion, then upsample; each module serves
/// images in order, and image `i` may enter only once image `i - depth` has
/// left. Cycles per stage are work divided by the module's array size.
pub fn pipeline_makespan(work: &[ModuleWork], cfg: &ExecConfig) -> f64 {
    let ext = (cfg.array_dims.0 as f64 * cfg.array_dims.1 as f64).max(1.0);
    let fus = (cfg.fusion_dims.0 as f64 * cfg.fusion_dims.1 as f64).max(1.0);
    let depth = cfg.pipeline_depth.max(1);
    let mut done: Vec<[f64; 3]> = Vec::with_capacity(work.len());
    for (i, w) in work.iter().enumerate() {
        let cost = [w.extraction as f64 / ext, w.fusion as f64 / fus, w.upsample as f64 / fus];
        let admit = if i >= depth { done[i - depth][2] } else { 0.0 };
        let mut t = [0.0; 3];
        let mut ready = admit;
        for s in 0..3 {
            let free = if i > 0 { done[i - 1][s] } else { 0.0 };
            t[s] = ready.max(free) + cost[s];
            ready = t[s];
        }
        done.push(t);
    }
    done.last().map_or(0.0, |d| d[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn makespan_improves_with_depth() {
        let work: Vec<ModuleWork> = (0..10)
            .map(|i| ModuleWork {
                extraction: 2048 * (3 + i % 4),
                fusion: 512 * (5 + i % 3),
                upsample: 512 * 2,
            })
            .collect();
        let mut last = f64::INFINITY;
        for depth in 1..=5 {
            let cfg = ExecConfig {
                pipeline_depth: depth,
                ..Default::default()
            };
            let m = pipeline_makespan(&work, &cfg);
            assert!(m <= last);
            last = m;
        }
        let seq: f64 = work.iter().map(|w| w.extraction as f64 / 2048.0 + (w.fusion + w.upsample) as f64 / 512.0).sum();
        let one = pipeline_makespan(&work, &ExecConfig::default());
        assert!((one - seq).abs() < 1e-9);
    }
}
