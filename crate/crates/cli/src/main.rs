mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "d4", version, about = "Differentiable Forth interpreter and sketch trainer")]
pub struct Cli {
    /// Random seed; falls back to D4_SEED, then 0.
    #[arg(long, global = true, env = "D4_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a program and print the final data stack, bottom first.
    Run(RunArgs),
    /// Train a sketch from a JSON config.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint at one or more test lengths.
    Eval(EvalArgs),
    /// Record the program-counter distribution of a continuous run as CSV.
    Trace(TraceArgs),
    /// Time naive, collapsed and interpolated execution plans.
    BenchOpt(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct MachineArgs {
    /// Program file or bundled sketch name.
    pub program: String,
    /// Initial data stack, bottom first.
    #[arg(long = "in", num_args = 1.., value_delimiter = ',')]
    pub input: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub stack_size: usize,
    #[arg(long, default_value_t = 10)]
    pub value_size: usize,
    /// Hand-written slot behaviour of a bundled sketch, for discrete runs of sketches.
    #[arg(long)]
    pub slots: Option<String>,
    /// Trained parameters (checkpoint prefix) for continuous runs of sketches.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Discrete step limit.
    #[arg(long, default_value_t = 1_000_000)]
    pub max_steps: usize,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub machine: MachineArgs,
    /// Use the differentiable machine.
    #[arg(long)]
    pub continuous: bool,
    /// Discretize the continuous state after every step.
    #[arg(long)]
    pub discretize: bool,
    /// Unroll length for continuous runs; derived from a discrete run by default.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sketch: Option<String>,
    #[arg(long)]
    pub train_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint prefix written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sketch name or file; must match the checkpoint's hash.
    #[arg(long)]
    pub sketch: String,
    #[arg(long, value_delimiter = ',', default_value = "8,64")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// JSON Lines test set instead of generated ones.
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub machine: MachineArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output CSV; defaults to a run directory under `runs/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Program file or bundled sketch name; inputs are `seq.. n`.
    #[arg(default_value = "sort-reference")]
    pub program: String,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub value_size: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Trace(a) => commands::trace(a),
        Command::BenchOpt(a) => commands::bench(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
