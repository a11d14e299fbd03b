//! Command-line front end: configuration, pipelines and run manifests.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neurosem_core::Error;

mod commands;
pub mod config;
pub mod manifest;

pub use config::{parse_config, RunConfig};

pub const ENDPOINT_ENV: &str = "NEUROSEM_ENDPOINT";

#[derive(Parser, Debug)]
#[command(name = "neurosem", version, about = "EEG-to-caption alignment pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a planted-structure EEG dataset and matching caption bank.
    Synth(SynthArgs),
    /// Train the encoder with the contrastive (or MSE) objective.
    Train(TrainArgs),
    /// Per-head top-k caption retrieval; writes the retrieval manifest.
    Retrieve(RetrieveArgs),
    /// Ensemble classification from per-head top-1 captions.
    Classify(EvalArgs),
    /// Per-channel gradient saliency and a topographic map.
    Saliency(SaliencyArgs),
    /// t-SNE of head embeddings with a scatter plot.
    Tsne(TsneArgs),
    /// Image and feature metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Send manifest prompts to an image-generation endpoint.
    Prompt(PromptArgs),
    /// Train contrastive and MSE variants and tabulate retrieval accuracy.
    Ablate(AblateArgs),
    /// Serve a local stand-in for the image endpoint.
    StubServer(StubArgs),
    /// Re-run a command from its run manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 10.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 512)]
    pub embed_dim: usize,
    /// Channels carrying the class signal.
    #[arg(long, value_delimiter = ',', default_value = "3,7,11")]
    pub informative_channels: Vec<usize>,
    /// Only this caption category encodes the class.
    #[arg(long)]
    pub informative_category: Option<String>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// contrastive | mse
    #[arg(long)]
    pub loss: Option<String>,
    /// Comma-separated heads that contribute to the loss.
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<String>>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// train | val | test | all
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    /// Print ensemble classification accuracy.
    #[arg(long)]
    pub classify: bool,
    /// all | top:N
    #[arg(long, default_value = "all")]
    pub policy: String,
    /// Dispatch prompts right after retrieval.
    #[arg(long)]
    pub dispatch: bool,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub image_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// `all` or a head name.
    #[arg(long, default_value = "all")]
    pub head: String,
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TsneArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<String>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum MetricsCommand {
    /// Fréchet distance between Gaussian fits of two feature sets.
    Fid(PairArgs),
    /// Kernel Inception Distance (cubic polynomial MMD²).
    Kid(KidArgs),
    /// Inception Score from a class-probability matrix.
    Is(IsArgs),
    /// Mean SSIM over paired PNG files or directories.
    Ssim(PairArgs),
    /// Mean pixel correlation over paired PNG files or directories.
    Pixcorr(PairArgs),
    /// Mean row-wise cosine similarity of paired features.
    Cosine(PairArgs),
    /// One minus the mean cosine of paired SwAV features.
    Swav(PairArgs),
    /// Two-way identification accuracy.
    TwoWay(TwoWayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct PairArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct KidArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long)]
    pub subsets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct IsArgs {
    #[arg(long)]
    pub probs: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TwoWayArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Average over every distractor instead of one sampled per row.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    /// Retrieval manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub image_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct StubArgs {
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub addr: String,
    /// Answer 500 when the prompt contains this text.
    #[arg(long)]
    pub fail_on: Option<String>,
    /// Append each received request to this JSONL file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command: the module it came from and the underlying error.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.module, self.error)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        exit_code(&self.error)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Schema { .. }
        | Error::Coverage(_)
        | Error::Lookup(_)
        | Error::Data(_)
        | Error::Stratification(_)
        | Error::Layout(_)
        | Error::File { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Image(_) => 3,
        Error::Transport { .. } => 5,
        Error::Dimension(_) | Error::Contract(_) | Error::Numeric(_) => 4,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status. Diagnostics go to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &raw) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, raw_args: &[String]) -> Result<(), CliError> {
    commands::dispatch(cli.command, raw_args)
}
