//! `tmf`: encode recordings, train and evaluate classifiers, explain frames.

mod commands;
mod config;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmf_core::TmfError;

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "tmf", version, about = "Triadic motif field encoding and AF classification")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// TOML file with defaults for any flag; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort of pulse-train recordings and its manifest.
    Synth(SynthArgs),
    /// Assign train/validation/test splits to a manifest.
    Split(SplitArgs),
    /// Encode every frame to a pooled TMF image in the cache.
    Encode(EncodeArgs),
    /// Train one classifier per seed.
    Train(TrainArgs),
    /// Score frames and recordings with one or more checkpoints.
    Evaluate(EvaluateArgs),
    /// Symmetrized Grad-CAM maps for chosen frames.
    Explain(ExplainArgs),
    /// Prediction as a function of frame length.
    Sweep(SweepArgs),
    /// Write GAP feature vectors for every frame.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DataArgs {
    /// CSV manifest `recording_id,path,label,split`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Frame length in samples.
    #[arg(long)]
    pub frame_length: Option<usize>,
    /// Frame stride for AF recordings.
    #[arg(long)]
    pub stride_af: Option<usize>,
    /// Frame stride for non-AF recordings.
    #[arg(long)]
    pub stride_nonaf: Option<usize>,
    /// Image cache directory (overrides TMF_CACHE_DIR).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Encode in memory without touching the cache.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct PreprocessArgs {
    /// Per-recording normalization: zscore, minmax or none.
    #[arg(long)]
    pub norm: Option<String>,
    /// Pooled image rows at the frame length (0 with --cols 0 keeps full size).
    #[arg(long)]
    pub rows: Option<usize>,
    /// Pooled image columns at the frame length.
    #[arg(long)]
    pub cols: Option<usize>,
    /// Extractor input scaling: minmax01 or none.
    #[arg(long)]
    pub scale: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Recordings per class.
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    /// Samples per recording.
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    /// Relative interval jitter of the AF-like recordings.
    #[arg(long, default_value_t = 0.4)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Shuffle all recordings together instead of per class.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pre: PreprocessArgs,
    /// Also write a PNG preview per frame.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pre: PreprocessArgs,
    /// Classifier head: mlp or logreg.
    #[arg(long)]
    pub head: Option<String>,
    /// Feature source: builtin or imported.
    #[arg(long)]
    pub extractor: Option<String>,
    /// Directory of `{id}_{start}_{length}.tmfa` feature maps.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Built-in CNN block widths, e.g. `8,16,16`; suffix `n` skips pooling.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<String>>,
    /// Keep the randomly initialized extractor fixed and train the head only.
    #[arg(long)]
    pub freeze: bool,
    /// Seeds, one model each (default 0,1,2,3,4).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Seed used when the manifest has no splits yet.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Random-search candidates for the logistic-regression head.
    #[arg(long)]
    pub search_budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoints to evaluate; metrics are averaged over them.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// Split to score: train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// AF decision threshold on y1.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Feature maps for checkpoints trained on imported features.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Class to explain: 1 or AF, 2 or NonAF.
    #[arg(long, default_value = "1")]
    pub class: String,
    /// Score to differentiate: logit or probability.
    #[arg(long, default_value = "logit")]
    pub target: String,
    /// Recording to explain (CSV or TMFS).
    #[arg(long)]
    pub signal: PathBuf,
    /// Frame start positions (1-based samples).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub starts: Vec<usize>,
    /// Frame length (default: the checkpoint's).
    #[arg(long)]
    pub frame_length: Option<usize>,
    /// Also write each map as a single-channel TMFI image.
    #[arg(long)]
    pub image: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub signal: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub min: usize,
    #[arg(long, default_value_t = 3000)]
    pub max: usize,
    #[arg(long, default_value_t = 100)]
    pub step: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint whose extractor produces the features.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// csv or binary.
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Only frames of this split.
    #[arg(long)]
    pub split: Option<String>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<TmfError>() {
        Some(TmfError::Config(_)) => EXIT_CONFIG,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let jobs = cli.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(TmfError::Config("--jobs must be at least 1".into()).into());
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| TmfError::Config(format!("cannot start worker pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| commands::dispatch(cli.command, &file, threads))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
