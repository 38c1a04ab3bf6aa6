//! The `occnet` command-line tool.

mod commands;
pub mod scene_file;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{Channels, DatasetError};
use crate::fusion::{FusionError, FusionMode};
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::trainer::TrainError;

pub use scene_file::{parse_scene_file, SceneFileError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(_) => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            FusionError::Train(t) => t.into(),
            FusionError::Dataset(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "occnet", version, about = "Occlusion edge detection in RGB-D frames with a patch CNN")]
pub struct Cli {
    /// TOML config file; command-line flags take precedence over its keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for weight initialization, shuffling and random scenes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scene file into a TUM-layout dataset with exact labels.
    Synth(SynthArgs),
    /// Write depth-derived label images for a dataset.
    LabelGen(LabelGenArgs),
    /// Label, split, extract and normalize patches into train/test caches.
    Extract(ExtractArgs),
    /// Train a model on extracted patches.
    Train(TrainArgs),
    /// Score a model on the test patch cache.
    Eval(EvalArgs),
    /// Sweep a model over full frames and write fused heatmaps.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "FILE")]
    pub scene: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelGenArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory (default: <data>/labels).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Depth jump in meters that marks an occlusion edge.
    #[arg(long)]
    pub tau_depth: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub tau_depth: Option<f32>,
    /// Patch grid stride for training frames.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Patch grid stride for test frames.
    #[arg(long)]
    pub test_stride: Option<usize>,
    #[arg(long)]
    pub max_invalid_fraction: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// First test frame index.
    #[arg(long)]
    pub split_boundary: Option<usize>,
    /// Keep at most this many training negatives per positive.
    #[arg(long)]
    pub balance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `extract`.
    #[arg(long, value_name = "DIR")]
    pub patches: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub channels: Option<Channels>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Patches scored per split for the epoch error curves.
    #[arg(long)]
    pub eval_subsample: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Directory written by `extract`.
    #[arg(long, value_name = "DIR")]
    pub patches: PathBuf,
    /// Report directory (default: the model's directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Row label in the report (default: the channel set).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Sweep stride; repeat for several.
    #[arg(long = "stride")]
    pub strides: Vec<usize>,
    /// Normalization statistics (default: stats.json beside the model).
    #[arg(long, value_name = "FILE")]
    pub stats: Option<PathBuf>,
    /// Frame indices to process (default: all); repeatable.
    #[arg(long = "frame")]
    pub frames: Vec<usize>,
    #[arg(long)]
    pub fwhm: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<FusionMode>,
}

fn parse_mode(s: &str) -> std::result::Result<FusionMode, String> {
    match s {
        "normalized" => Ok(FusionMode::Normalized),
        "sum" => Ok(FusionMode::Sum),
        _ => Err(format!("unknown fusion mode '{s}' (expected normalized or sum)")),
    }
}

impl Cli {
    /// Config file (if any) overlaid with global flags.
    fn base_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        cfg.deterministic |= self.deterministic;
        cfg.train.shuffle_seed = cfg.seed;
        Ok(cfg)
    }
}

fn configure_threads(cfg: &RunConfig) {
    let threads = if cfg.deterministic { Some(1) } else { cfg.threads };
    if let Some(n) = threads {
        // The global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.base_config()?;
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::LabelGen(a) => commands::label_gen(cfg, a, configure_threads),
        Command::Extract(a) => commands::extract(cfg, a, configure_threads),
        Command::Train(a) => commands::train(cfg, a, configure_threads),
        Command::Eval(a) => commands::eval(cfg, a, configure_threads),
        Command::Infer(a) => commands::infer(cfg, a, configure_threads),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
