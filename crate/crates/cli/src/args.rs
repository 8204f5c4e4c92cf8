use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bccseg", version, about = "Tumor segmentation pipeline for histology images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic histology-like dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Predict a tumor mask for one image.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Evaluate externally produced masks against ground truth.
    Metrics(MetricsArgs),
    /// Report per-layer parameter and multiply-accumulate counts.
    Ops(OpsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub count: usize,
    #[arg(long, default_value_t = 0.48)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 192)]
    pub width: usize,
    #[arg(long, default_value_t = 144)]
    pub height: usize,
    /// Per-class fraction of images assigned to the train split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Architecture overrides; `--model-config` is applied first, flags after.
#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// JSON file with model config fields.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub stem_channels: Option<usize>,
    /// Widths of the three downsampling blocks, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub block_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub middle_blocks: Option<usize>,
    #[arg(long)]
    pub aspp_channels: Option<usize>,
    /// Three increasing atrous rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub aspp_rates: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file, rewritten after every epoch.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Background and tumor loss weights, e.g. `1,2`.
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f64>>,
    /// Seed for weight initialization and shuffling.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Training log CSV; defaults to `train_log.csv` beside the checkpoint.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from the checkpoint's weights and optimizer state.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Binary mask PNG, tumor white on black.
    #[arg(long)]
    pub mask_out: PathBuf,
    /// Input image with tumor pixels tinted red.
    #[arg(long)]
    pub overlay_out: Option<PathBuf>,
    /// Tumor-probability cut instead of argmax.
    #[arg(long)]
    pub prob_threshold: Option<f64>,
    #[arg(long, default_value_t = 0.005)]
    pub threshold_fraction: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub roc: PathBuf,
    #[arg(long)]
    pub pr: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    pub threshold_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Tumor-probability cut instead of argmax.
    #[arg(long)]
    pub prob_threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Predicted masks, one `<id>.png` per ground-truth file. Gray values
    /// are read as tumor scores `v/255`; `v >= 128` is a tumor pixel.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Ground-truth masks (0/255).
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub roc: Option<PathBuf>,
    #[arg(long)]
    pub pr: Option<PathBuf>,
    #[arg(long, default_value_t = 0.005)]
    pub threshold_fraction: f64,
}

#[derive(Args, Debug)]
pub struct OpsArgs {
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}
