mod commands;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, or input paths (exit 2).
    Usage(String),
    /// Numeric or internal failure (exit 1).
    Internal(String),
}

impl Failure {
    fn context(self, what: &str) -> Self {
        match self {
            Failure::Usage(m) => Failure::Usage(format!("{what}: {m}")),
            Failure::Internal(m) => Failure::Internal(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<mpanet::Error> for Failure {
    fn from(e: mpanet::Error) -> Self {
        use mpanet::Error as E;
        match e {
            E::Config(_)
            | E::Io { .. }
            | E::Parse { .. }
            | E::Dimension { .. }
            | E::UndefinedPd => Failure::Usage(e.to_string()),
            E::Contract(_) | E::DegenerateVariance | E::Instability(_) | E::Divergence { .. } => {
                Failure::Internal(e.to_string())
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mpanet",
    version,
    about = "Multi-patch axial attention network for infrared small target segmentation"
)]
pub struct Cli {
    /// Settings file of `key = value` lines; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every output of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (images/, masks/, split.txt).
    Synth(SynthArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint, or a directory of predicted masks, on a dataset split.
    Eval(EvalArgs),
    /// Write heatmap and mask rasters for one image.
    Infer(InferArgs),
    /// Central-difference gradient checks of every registered op.
    Gradcheck(GradcheckArgs),
    /// Time and count multiply-accumulates of axial vs non-local attention.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of images.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// flat, gradient or cloud.
    #[arg(long)]
    pub background: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Network input height (defaults to the dataset image height).
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Channel width per encoder stage, e.g. 16,32,64.
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Three patch grid factors, one of them 1.
    #[arg(long)]
    pub patch_scales: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with split.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// soft_iou or bce.
    #[arg(long)]
    pub loss: Option<String>,
    /// Continue from this checkpoint at its saved epoch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model settings written by `train` (defaults to model.cfg beside the checkpoint).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Score `<id>.pgm` masks from this directory instead of running a model.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// Report F1 as P·R/(P+R) instead of the harmonic mean.
    #[arg(long)]
    pub f1_as_printed: bool,
    /// Report IoU as TP/(T+P−FP) instead of TP/(T+P−TP).
    #[arg(long)]
    pub iou_as_printed: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// 8-bit PGM input image.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random seeds per op.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Probed entries per parameter tensor in the whole-network check (0 skips it).
    #[arg(long)]
    pub coords: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Side lengths H = W, e.g. 8,16,32,64.
    #[arg(long)]
    pub sizes: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            match f {
                Failure::Usage(_) => ExitCode::from(2),
                Failure::Internal(_) => ExitCode::from(1),
            }
        }
    }
}
