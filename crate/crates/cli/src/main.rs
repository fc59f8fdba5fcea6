//! `huse`: data generation, graph building, training, evaluation and
//! gradient checking from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use huse_core::HuseError;

/// Exit status for usage and validation errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for filesystem errors.
pub const EXIT_IO: u8 = 3;
/// Exit status when training diverges.
pub const EXIT_NUMERIC: u8 = 4;
/// Exit status when a gradient check fails.
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "huse",
    version,
    about = "Universal image/text embeddings with semantic-graph regularization"
)]
pub struct Cli {
    /// Worker threads for loss and metric reductions; 1 keeps everything sequential.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic hierarchical dataset.
    GenData(GenDataArgs),
    /// Build the semantic graph from class-name embeddings.
    BuildGraph(BuildGraphArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint: retrieval, hierarchical precision, classification.
    Eval(EvalArgs),
    /// Write inference embeddings of one split and modality.
    ExportEmbeddings(ExportArgs),
    /// Compare every analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Synthetic dataset specification (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Default seed when neither the flag nor the spec sets one.
    #[arg(long = "env-seed", env = "HUSE_SEED", hide = true)]
    pub env_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BuildGraphArgs {
    /// Class-name embeddings TSV.
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    pub class_embeddings: Option<PathBuf>,
    /// Dataset manifest; its class-embeddings file is used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output adjacency TSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training configuration (JSON); missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, history and config snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// Precomputed adjacency TSV; built from the class embeddings otherwise.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "env-seed", env = "HUSE_SEED", hide = true)]
    pub env_seed: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Momentum coefficient.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Pairs per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// `huse` or `huse_p`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Classification weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Graph (or projection) weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Gap weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Graph-loss margin.
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Steps between logged validation rows; 0 disables them.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Steps between intermediate checkpoints; 0 disables them.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the report tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Count only the paired instance as a cross-modal match.
    #[arg(long)]
    pub paired_instance: bool,
    /// Fixed fusion weight; selected on the validation split otherwise.
    #[arg(long)]
    pub fusion_weight: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to embed.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `image` or `text`.
    #[arg(long)]
    pub modality: String,
    /// Output feature-format TSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for the random problem instance.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "env-seed", env = "HUSE_SEED", hide = true)]
    pub env_seed: Option<u64>,
    /// Problem sizes as `key=value` pairs, e.g. `n=6,d=8,k=5`.
    #[arg(long)]
    pub dims: Option<String>,
    /// Corrupts one component's analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|e| e.downcast_ref::<HuseError>())
            .map_or(EXIT_USAGE, |e| match e {
                HuseError::Io { .. } => EXIT_IO,
                HuseError::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            });
        Self { code, error }
    }
}

impl From<HuseError> for Failure {
    fn from(e: HuseError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
