use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use snifr_core::FusionKind;

#[derive(Debug, Parser)]
#[command(name = "snifr", version, about = "Audio-visual fusion classifiers over 768-d clip features")]
pub struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-bit complementary dataset.
    Synth(SynthArgs),
    /// Cross-validate one model kind.
    Train(TrainArgs),
    /// Cross-validate several model kinds on one shared fold plan.
    Compare(CompareArgs),
    /// Finite-difference gradient check of a small model.
    Gradcheck(GradcheckArgs),
    /// Write penultimate-layer embeddings of a checkpoint as CSV.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    #[default]
    Both,
    Audio,
    Video,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Modalities whose feature carries its label bit.
    #[arg(long, value_enum, default_value_t = Signal::Both)]
    pub signal: Signal,
    /// Draw labels with the reference corpus class proportions.
    #[arg(long)]
    pub imbalanced: bool,
}

/// Options shared by `train` and `compare`.
#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub wd: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-dir", visible_alias = "out")]
    pub out_dir: PathBuf,
    /// Width after the input projection.
    #[arg(long, default_value_t = 256)]
    pub dmodel: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Feed-forward width; twice `--dmodel` when omitted.
    #[arg(long)]
    pub dff: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long = "val-fraction", default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long = "class-weighting")]
    pub class_weighting: bool,
    #[arg(long = "max-grad-norm")]
    pub max_grad_norm: Option<f64>,
    /// Parallel fold workers (SNIFR_THREADS overrides).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: FusionKind,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Comma-separated model kinds, in table order.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, required = true)]
    pub models: Vec<FusionKind>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: FusionKind,
    #[arg(long, default_value_t = 8)]
    pub dmodel: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-dir")]
    pub out_dir: Option<std::path::PathBuf>,
    /// Corrupts one backward rule so the check must fail.
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> Result<FusionKind, String> {
    s.parse().map_err(|e: snifr_core::ModelError| e.to_string())
}
