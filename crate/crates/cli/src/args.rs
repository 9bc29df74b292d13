use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "capsie",
    version,
    about = "Capsule-based invariant and equivariant self-supervised learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic rotation dataset archive.
    GenData(GenDataArgs),
    /// Pretrain a model and write its log, checkpoints and curves.
    Pretrain(PretrainArgs),
    /// Class probe on the activation (and pooled) embeddings.
    EvalClassify(EvalArgs),
    /// Relative-rotation probe on the pose embedding.
    EvalRotation(EvalArgs),
    /// Colour probe on the pose embedding.
    EvalColour(EvalArgs),
    /// Predictor-driven retrieval on held-out objects.
    EvalRetrieval(EvalArgs),
    /// Pretrain and evaluate once per capsule count.
    Sweep(SweepArgs),
    /// Merge run reports into one CSV table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Objects per class.
    #[arg(long, default_value_t = 20)]
    pub objects: usize,
    /// Views per object.
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Run directory; the archive is written to `<out>/dataset.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings; each flag overrides the matching config entry.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset archive, or a directory holding `dataset.bin`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_caps: Option<usize>,
    /// `capsule` or `split-mlp`.
    #[arg(long)]
    pub projector: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_inv: Option<f64>,
    #[arg(long)]
    pub lambda_equi: Option<f64>,
    #[arg(long)]
    pub lambda_v: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    /// Online evaluation every this many epochs; 0 disables it.
    #[arg(long)]
    pub eval_cadence: Option<usize>,
    /// Keep a checkpoint every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

/// Probe protocol settings for evaluation.
#[derive(Debug, Args, Default, Clone)]
pub struct ProtocolArgs {
    /// JSON evaluation protocol.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    /// Overrides the epoch count of every probe.
    #[arg(long)]
    pub probe_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Run directory; defaults to `runs/pretrain-<config hash>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the full evaluation after training.
    #[arg(long)]
    pub eval: bool,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset archive; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory; defaults to the run that wrote the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Capsule counts, comma separated.
    #[arg(long = "caps", value_delimiter = ',', default_value = "8,16,32")]
    pub caps: Vec<usize>,
    /// Sweep directory; each run gets its own subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
