//! `hparse`: dataset generation, training, evaluation, inference, ablation and
//! self-verification.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 verification failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hparse", version, about = "Hierarchical human parsing with typed part relations")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Hierarchy config file; defaults to the built-in six-part hierarchy.
    #[arg(long, global = true)]
    pub hierarchy: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic figure dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint (or a directory of label images) on a dataset.
    Eval(EvalArgs),
    /// Predict label maps, probabilities, attention maps and overlays.
    Infer(InferArgs),
    /// Train and score every ablation variant over several seeds.
    Ablate(AblateArgs),
    /// Run the structural self-checks on a freshly initialised model.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator config (TOML); --size and --seed override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training config (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    /// Message-passing iterations.
    #[arg(long = "T")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint directory (its config wins).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct InferFlags {
    /// Message-passing iterations; defaults to the checkpoint's.
    #[arg(long = "T")]
    pub iterations: Option<usize>,
    /// Comma-separated test scales.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.75, 1.0, 1.25, 1.5])]
    pub scales: Vec<f64>,
    /// Skip mirrored copies.
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of predicted label PNGs named like the dataset's label files.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub infer: InferFlags,
    /// Count background as a class in mIoU.
    #[arg(long)]
    pub include_background: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG image or a directory of PNG images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub infer: InferFlags,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Full-model training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated variant names; defaults to every table row.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0])]
    pub scales: Vec<f64>,
    /// Average with mirrored copies at test time.
    #[arg(long)]
    pub flip: bool,
    #[arg(long)]
    pub include_background: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the results as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
