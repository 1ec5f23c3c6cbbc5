//! One binary for every workflow: training, evaluation, corruption sweeps,
//! gradient checks, footprint reports, schedule inspection, dataset
//! synthesis, and chart emission.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numeric or stability
//! failure, 3 I/O error.

mod commands;
mod config;
mod svg;

use clap::{Args, Parser, Subcommand};
use stablemamba_core::tensor::TensorError;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "stablemamba",
    version,
    about = "Interleaved Mamba-attention vision stack: train, evaluate, corrupt, inspect",
    after_help = "Set STABLEMAMBA_THREADS to cap worker parallelism (0 or 1 = single-threaded)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory; writes checkpoints, metrics, and the
    /// effective config
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory
    Eval(EvalArgs),
    /// Accuracy-vs-severity sweep of a checkpoint under a corruption
    #[command(name = "corrupt-eval")]
    CorruptEval(CorruptEvalArgs),
    /// Finite-difference gradient checks over the block suite
    Gradcheck(GradcheckArgs),
    /// Parameter counts of the model presets
    Params(ParamsArgs),
    /// Analytic multiply-accumulate counts of the model presets
    Flops(FlopsArgs),
    /// Print the Mamba/Transformer layout for a depth, ratio, and position
    Schedule(ScheduleArgs),
    /// Generate the synthetic two-class grating dataset
    Synth(SynthArgs),
    /// Render a metrics or sweep CSV as an SVG line chart
    Plot(PlotArgs),
}

/// Flags shared by commands that assemble an effective run config.
#[derive(Args)]
pub struct ConfigArgs {
    /// JSON config file; keys overlay the preset base
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. --set train.lr=1e-3 (repeatable; unknown keys
    /// are rejected)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Model preset the config starts from: T, S, M, or B
    #[arg(long)]
    pub preset: Option<String>,
    /// Shorthand for --set train.seed=N
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the effective config and exit without touching anything
    #[arg(long)]
    pub dump: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training dataset directory (PNG files + labels.csv)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out eval directory; defaults to the training set
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Optional output directory for the accuracy report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CorruptEvalArgs {
    /// Checkpoint file to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Corruption kind: blur (gaussian_blur) or jpeg
    #[arg(long)]
    pub kind: String,
    /// Optional output directory for the sweep CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Check every registered block (the default)
    #[arg(long)]
    pub all: bool,
    /// Check a single block by name
    #[arg(long, conflicts_with = "all")]
    pub block: Option<String>,
}

#[derive(Args)]
pub struct ParamsArgs {
    /// Single preset to report; all four otherwise
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args)]
pub struct FlopsArgs {
    /// Single preset to report; all four otherwise
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the input resolution (must be divisible by the patch size)
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args)]
pub struct ScheduleArgs {
    /// Total number of blocks
    #[arg(long)]
    pub depth: usize,
    /// Mamba blocks per Transformer block in each group
    #[arg(long)]
    pub ratio: usize,
    /// Transformer slot within each group: start, middle, or end
    #[arg(long, default_value = "middle")]
    pub position: String,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Input CSV file
    #[arg(long)]
    pub input: PathBuf,
    /// Output SVG file
    #[arg(long)]
    pub out: PathBuf,
    /// Column for the x axis (default: "step" if present, else the first)
    #[arg(long)]
    pub x: Option<String>,
    /// Column(s) to plot (repeatable; default: every numeric column)
    #[arg(long = "y")]
    pub y: Vec<String>,
    /// Chart title (default: input file stem)
    #[arg(long)]
    pub title: Option<String>,
}

fn exit_code_for(e: &TensorError) -> i32 {
    match e {
        TensorError::StabilityFailure { .. } | TensorError::NonFinite { .. } => 2,
        TensorError::Io { .. } => 3,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<i32, TensorError> {
    match &cli.command {
        Command::Train(args) => commands::run_train(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::CorruptEval(args) => commands::run_corrupt_eval(args),
        Command::Gradcheck(args) => commands::run_gradcheck(args),
        Command::Params(args) => commands::run_params(args),
        Command::Flops(args) => commands::run_flops(args),
        Command::Schedule(args) => commands::run_schedule(args),
        Command::Synth(args) => commands::run_synth(args),
        Command::Plot(args) => commands::run_plot(args),
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn main() {
    std::process::exit(run());
}
