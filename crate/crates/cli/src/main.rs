use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpf_core::TpfError;

mod commands;
mod config;
mod report;

use config::StrategyKind;

/// Class pre-selection for few-shot detection on synthetic episodes.
#[derive(Debug, Parser)]
#[command(name = "tpf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic episode pack.
    Gen(GenArgs),
    /// Train a filter checkpoint on a pack.
    Train(TrainArgs),
    /// Compare the full loop with a selection strategy.
    Eval(EvalArgs),
    /// Time the full and minor loops and fit a cost profile.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Index of the first generated episode.
    #[arg(long)]
    pub offset: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Classes present per query.
    #[arg(long)]
    pub present: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long)]
    pub amplitude: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Phases in order, e.g. `joint,tpf`.
    #[arg(long)]
    pub phase: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub negative_ratio: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StrategyArgs {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyKind>,
    /// Classes kept by top-n.
    #[arg(long)]
    pub n: Option<usize>,
    /// Score cut-off for adaptive.
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub peak_threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pack: PathBuf,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    /// Directory for `eval.json` and `recall.csv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pack: PathBuf,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Cost profile (TOML) used for predictions instead of the bundled one.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Write the fitted profile here as TOML.
    #[arg(long)]
    pub save_profile: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<TpfError>(), Some(TpfError::Diverged { .. })));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
