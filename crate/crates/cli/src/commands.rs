use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use fcnvm::bfp::BfpConfig;
use fcnvm::datapath::UpsampleMode;
use fcnvm::executor::{peak_macs, run_pipeline, ExecConfig, RunOutput};
use fcnvm::ir::{parse_model, ModelGraph, WeightStore};
use fcnvm::mcode::{disassemble, lower, LowerOptions, MicroProgram, OP_CONV, OP_NULL, OP_POOL, OP_UPSAMPLE, WORD_BYTES};
use fcnvm::oracle::{compare_runs, reference_forward};
use fcnvm::postproc::{boxes_to_json, extract_boxes, PredictionMaps};
use fcnvm::{fixtures, io, HalfTensor};

use crate::{BfpArgs, CompareArgs, CompileArgs, DetectArgs, ExecArgs, GenArgs, RunArgs, StatsArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Compile(String),
    #[error("{0}")]
    Runtime(String),
    #[error("max relative error {actual:e} exceeds tolerance {tol:e}")]
    Tolerance { actual: f64, tol: f64 },
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Compile(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Tolerance { .. } => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn compile_err(e: impl std::fmt::Display) -> CliError {
    CliError::Compile(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read(path: &Path, err: fn(String) -> CliError) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn load_model(model: &Path, weights: &Path) -> Result<(ModelGraph, WeightStore)> {
    let text = String::from_utf8(read(model, CliError::Compile)?)
        .map_err(|_| compile_err(format!("{}: not UTF-8", model.display())))?;
    let graph = parse_model(&text).map_err(|e| compile_err(format!("{}: {e}", model.display())))?;
    let bytes = read(weights, CliError::Compile)?;
    let store = WeightStore::read_from(&bytes[..]).map_err(|e| compile_err(format!("{}: {e}", weights.display())))?;
    Ok((graph, store))
}

pub fn parse_shape(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse().map_err(|_| format!("bad shape {s:?}, expected CxHxW")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(format!("bad shape {s:?}, expected CxHxW")),
    }
}

fn lower_options(b: &BfpArgs) -> LowerOptions {
    LowerOptions {
        bfp: BfpConfig {
            block_size: b.block_size,
            mantissa_bits: b.mantissa_bits,
        },
        upsample: if b.nearest { UpsampleMode::Nearest } else { UpsampleMode::Bilinear },
        ..LowerOptions::default()
    }
}

pub fn compile(a: &CompileArgs) -> Result<()> {
    let shape = parse_shape(&a.shape).map_err(CliError::Compile)?;
    let (graph, weights) = load_model(&a.model, &a.weights)?;
    let program = lower(&graph, &weights, shape, &lower_options(&a.bfp)).map_err(compile_err)?;
    let bytes = program.to_bytes().map_err(compile_err)?;
    write(&a.out, &bytes)?;
    if let Some(listing) = &a.listing {
        write(listing, disassemble(&program).map_err(compile_err)?.as_bytes())?;
    }
    println!(
        "layers={} microops={} (extraction {}, fusion {}) conv={} microcode_bytes={} file_bytes={}{}",
        graph.len(),
        program.len(),
        program.extraction.len(),
        program.fusion.len(),
        program.conv_count(),
        program.len() * WORD_BYTES,
        bytes.len(),
        if program.transposed { " transposed" } else { "" }
    );
    Ok(())
}

fn load_program(path: &Path) -> Result<MicroProgram> {
    MicroProgram::from_bytes(&read(path, CliError::Runtime)?).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

/// `(stem, tensor)` for a tensor file or every `.tnsr` file of a directory.
fn load_inputs(path: &Path) -> Result<Vec<(String, HalfTensor)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| runtime_err(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tnsr"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            let t = io::read_half(&read(f, CliError::Runtime)?[..]).map_err(|e| runtime_err(format!("{}: {e}", f.display())))?;
            let stem = f.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
            Ok((stem, t))
        })
        .collect()
}

fn exec_config(pipeline: usize, trace: bool, seed: Option<u64>, buffer: Option<usize>) -> Result<ExecConfig> {
    let mut cfg = ExecConfig::from_env().map_err(runtime_err)?;
    cfg.pipeline_depth = pipeline;
    cfg.trace = trace;
    cfg.fuzz_seed = seed;
    if let Some(b) = buffer {
        cfg.buffer_bytes = b;
    }
    cfg.validate().map_err(runtime_err)?;
    Ok(cfg)
}

fn execute(a: &ExecArgs) -> Result<Vec<(String, RunOutput)>> {
    let cfg = exec_config(a.pipeline, a.trace, a.seed, a.buffer_bytes)?;
    let program = load_program(&a.program)?;
    let inputs = load_inputs(&a.input)?;
    let tensors: Vec<HalfTensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let out = run_pipeline(&program, &tensors, &cfg);
    let mut runs = Vec::new();
    for ((stem, _), r) in inputs.into_iter().zip(out.results) {
        let r = r.map_err(|e| runtime_err(format!("{stem}: {e}")))?;
        for line in &r.trace {
            eprintln!("{line}");
        }
        println!("{stem}: {}", r.counters.summary());
        runs.push((stem, r));
    }
    Ok(runs)
}

pub fn run(a: &RunArgs) -> Result<()> {
    let many = a.exec.input.is_dir();
    for (stem, r) in execute(&a.exec)? {
        for (name, t) in &r.outputs {
            let file = if many { format!("{stem}.{name}.tnsr") } else { format!("{name}.tnsr") };
            let mut bytes = Vec::new();
            io::write_half(t, &mut bytes).map_err(runtime_err)?;
            write(&a.out.join(file), &bytes)?;
        }
    }
    Ok(())
}

pub fn detect(a: &DetectArgs) -> Result<()> {
    let many = a.exec.input.is_dir();
    for (stem, r) in execute(&a.exec)? {
        let boxes = match (r.outputs.get("score"), r.outputs.get("link")) {
            (Some(s), Some(l)) => {
                let maps = PredictionMaps::from_heads(s, l).map_err(runtime_err)?;
                extract_boxes(&maps, a.score_thresh, a.link_thresh, a.min_area).map_err(runtime_err)?
            }
            _ => Vec::new(),
        };
        let path = if many { a.out.join(format!("{stem}.json")) } else { a.out.clone() };
        let mut json = boxes_to_json(&boxes);
        json.push('\n');
        write(&path, json.as_bytes())?;
        println!("{stem}: {} boxes", boxes.len());
    }
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let (graph, weights) = load_model(&a.model, &a.weights)?;
    let x = io::read_half(&read(&a.input, CliError::Runtime)?[..]).map_err(|e| runtime_err(format!("{}: {e}", a.input.display())))?;
    let opts = lower_options(&a.bfp);
    let program = lower(&graph, &weights, x.shape(), &opts).map_err(compile_err)?;
    let sim = fcnvm::executor::run_program(&program, &x, &exec_config(1, false, None, None)?).map_err(runtime_err)?;
    let reference = reference_forward(&graph, &weights, &x.to_f32(), opts.upsample).map_err(runtime_err)?;
    let sim = sim.outputs.iter().map(|(k, v)| (k.clone(), v.map(|x| x.to_f64()))).collect();
    let reference = reference.iter().map(|(k, v)| (k.clone(), v.map(|x| x as f64))).collect();
    let report = compare_runs(&sim, &reference).map_err(runtime_err)?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    let actual = report.max_rel();
    if actual > a.tol || (a.tol == 0.0 && report.max_abs() > 0.0) {
        return Err(CliError::Tolerance { actual, tol: a.tol });
    }
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let program = load_program(&a.program)?;
    let count = |t: u8| program.ops().filter(|(_, op)| op.layer_type == t).count();
    println!("microops={} extraction={} fusion={}", program.len(), program.extraction.len(), program.fusion.len());
    println!(
        "conv={} pool_or_sigmoid={} upsample={} null={} residual_pairs={}",
        count(OP_CONV),
        count(OP_POOL),
        count(OP_UPSAMPLE),
        count(OP_NULL),
        program.residual_pairs()
    );
    let footprint = program.alloc_map.values().map(|r| r.out_addr + r.bytes).max().unwrap_or(0);
    println!(
        "microcode_bytes={} feature_memory_bytes={footprint} transposed={}",
        program.len() * WORD_BYTES,
        program.transposed
    );
    let cfg = exec_config(a.pipeline, false, None, None)?;
    println!("peak_macs_per_s={:e}", peak_macs(&cfg));
    if let Some(input) = &a.input {
        let inputs: Vec<HalfTensor> = load_inputs(input)?.into_iter().map(|(_, t)| t).collect();
        let out = run_pipeline(&program, &inputs, &cfg);
        let mut macs = 0;
        for r in &out.results {
            macs += r.as_ref().map_err(runtime_err)?.counters.mac_ops;
        }
        let seconds = out.makespan_cycles / cfg.clock_hz;
        println!(
            "images={} macs={macs} makespan_cycles={:.0} images_per_s={:.3} utilization={:.3}",
            inputs.len(),
            out.makespan_cycles,
            out.throughput,
            if seconds > 0.0 { macs as f64 / seconds / peak_macs(&cfg) } else { 0.0 }
        );
    }
    Ok(())
}

pub fn gen_fixtures(a: &GenArgs) -> Result<()> {
    let shape_arg = a.shape.as_deref().map(parse_shape).transpose().map_err(CliError::Compile)?;
    let (graph, weights, shape) = match a.kind.as_str() {
        "random" => fixtures::random_model(a.seed),
        kind => {
            let graph = match kind {
                "detector" => fixtures::text_detector(3),
                "resnet50" => fixtures::resnet50_extractor(),
                "vgg16" => fixtures::vgg16_extractor(),
                _ => return Err(compile_err(format!("unknown fixture kind {kind:?}"))),
            };
            let weights = fixtures::random_weights(&graph, a.seed);
            (graph, weights, shape_arg.unwrap_or((3, 32, 32)))
        }
    };
    let shape = if a.kind == "random" { shape } else { shape_arg.unwrap_or(shape) };
    write(&a.out.join("model.json"), graph.to_json().as_bytes())?;
    write(&a.out.join("weights.fcnw"), &weights.to_bytes())?;
    let mut input = Vec::new();
    io::write_half(&fixtures::random_input(shape, a.seed), &mut input).map_err(runtime_err)?;
    write(&a.out.join("input.tnsr"), &input)?;
    println!("{}x{}x{}", shape.0, shape.1, shape.2);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("3x64x5000"), Ok((3, 64, 5000)));
        assert_eq!(parse_shape("1,2,3"), Ok((1, 2, 3)));
        assert!(parse_shape("3x0x4").is_err());
        assert!(parse_shape("3x4").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Compile(String::new()).code(), 2);
        assert_eq!(CliError::Runtime(String::new()).code(), 3);
        assert_eq!(CliError::Tolerance { actual: 1.0, tol: 0.0 }.code(), 4);
    }
}
