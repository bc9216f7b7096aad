//! `fcnvm`: compile FCN models to microcode, run them on the simulator,
//! extract text boxes and check numerics against the float reference.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fcnvm", version, about = "FCN accelerator microcode compiler and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower a model and its weights to a program file.
    Compile(CompileArgs),
    /// Execute a program and write its output maps.
    Run(RunArgs),
    /// Execute a program and write the detected text boxes as JSON.
    Detect(DetectArgs),
    /// Compare the simulator against the float reference.
    Compare(CompareArgs),
    /// Report program structure and, given inputs, performance counters.
    Stats(StatsArgs),
    /// Write a seeded random model, weights and input.
    #[command(hide = true)]
    GenFixtures(GenArgs),
}

#[derive(Args, Clone)]
pub struct BfpArgs {
    /// BFP mantissa width including sign
    #[arg(long, default_value_t = 16)]
    pub mantissa_bits: u32,
    /// values per shared exponent
    #[arg(long, default_value_t = 32)]
    pub block_size: usize,
    /// use nearest-neighbour instead of bilinear upsampling
    #[arg(long)]
    pub nearest: bool,
}

#[derive(Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// input shape as CxHxW
    #[arg(long)]
    pub shape: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bfp: BfpArgs,
    /// also write the assembly listing here
    #[arg(long)]
    pub listing: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExecArgs {
    #[arg(long)]
    pub program: PathBuf,
    /// a tensor file, or a directory of `.tnsr` files
    #[arg(long)]
    pub input: PathBuf,
    /// images in flight
    #[arg(long, default_value_t = 1)]
    pub pipeline: usize,
    /// print one line per executed op to stderr
    #[arg(long)]
    pub trace: bool,
    /// seed for randomized pipeline interleaving
    #[arg(long)]
    pub seed: Option<u64>,
    /// on-chip line buffer in bytes
    #[arg(long)]
    pub buffer_bytes: Option<usize>,
}

#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub exec: ExecArgs,
    /// output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub exec: ExecArgs,
    /// box JSON file, or a directory when the input is one
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub score_thresh: f32,
    #[arg(long, default_value_t = 0.5)]
    pub link_thresh: f32,
    #[arg(long, default_value_t = 0)]
    pub min_area: usize,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// largest accepted relative error
    #[arg(long, default_value_t = 2e-2)]
    pub tol: f64,
    #[command(flatten)]
    pub bfp: BfpArgs,
    /// print the report as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub program: PathBuf,
    /// optional tensor file or directory to execute
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub pipeline: usize,
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// output directory
    #[arg(long)]
    pub out: PathBuf,
    /// random, detector, resnet50 or vgg16
    #[arg(long, default_value = "random")]
    pub kind: String,
    /// input shape as CxHxW (ignored for random models)
    #[arg(long)]
    pub shape: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile(a) => commands::compile(&a),
        Command::Run(a) => commands::run(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::GenFixtures(a) => commands::gen_fixtures(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fcnvm: {e}");
            ExitCode::from(e.code())
        }
    }
}
