use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mnad::data::AnomalyKind;
use mnad::model::Task;
use mnad::scoring::NormalizationScope;

mod config;
mod eval;
mod gendata;
mod output;
mod score;
mod train;

#[derive(Debug, Parser)]
#[command(name = "mnad", version, about = "Memory-guided normality learning for video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset of moving squares with labelled anomalies.
    Gendata(GendataArgs),
    /// Train a model on the normal clips of a dataset.
    #[command(after_help = config::KEYS_HELP)]
    Train(TrainArgs),
    /// Score a labelled test split and report frame-level AUC.
    #[command(after_help = config::KEYS_HELP)]
    Eval(EvalArgs),
    /// Score one directory of frames, writing a row per frame as it goes.
    Score(ScoreArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Train,
    Test,
    Both,
}

#[derive(Debug, Args)]
struct GendataArgs {
    /// Dataset root; splits go to <OUT>/train and <OUT>/test.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every clip's random stream.
    #[arg(long, env = "MNAD_SEED", default_value_t = 0)]
    seed: u64,
    /// Clips per split.
    #[arg(long, default_value_t = 8)]
    clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 64)]
    len: usize,
    /// Which splits to write.
    #[arg(long, value_enum, default_value_t = SplitChoice::Both)]
    split: SplitChoice,
    /// Comma-separated anomaly kinds for the test split: vertical, speed, disc.
    #[arg(long, value_delimiter = ',', value_parser = parse_anomaly)]
    anomalies: Option<Vec<AnomalyKind>>,
    /// Frame height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Frame width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Replace existing splits in a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root containing a train/ split.
    #[arg(long)]
    data: PathBuf,
    /// Directory for the checkpoint, training log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file; see the key list below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// reconstruction or prediction; selects the task defaults [default: prediction]
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Train the baseline that bypasses the memory.
    #[arg(long)]
    no_memory: bool,
    /// train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate of the cosine schedule (train.lr).
    #[arg(long)]
    lr: Option<f64>,
    /// Number of memory items.
    #[arg(long)]
    items: Option<usize>,
    /// Compactness weight (losses.lambda_c).
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Separateness weight (losses.lambda_s).
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Let the feature losses update the items as parameters as well.
    #[arg(long)]
    trainable_items: bool,
    /// Seed for initialization and window shuffling (train.seed).
    #[arg(long, env = "MNAD_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GateArgs {
    /// Update the memory on every test frame (gamma = inf).
    #[arg(long, conflicts_with = "gamma")]
    gate_off: bool,
    /// Gate threshold on the regular score E_t.
    #[arg(long)]
    gamma: Option<f64>,
    /// PSNR weight in the fused score (1.0 uses PSNR only).
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root containing a test/ split.
    #[arg(long)]
    data: PathBuf,
    /// Directory for the trace, metrics and CSV dumps.
    #[arg(long)]
    out: PathBuf,
    /// TOML file overriding test-time keys ([score], memory.gamma).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fail unless the checkpoint was trained for this task.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[command(flatten)]
    gate: GateArgs,
    /// Min-max normalization scope: per-video or global.
    #[arg(long, value_parser = parse_scope)]
    scope: Option<NormalizationScope>,
    /// Restart each video from the trained bank.
    #[arg(long)]
    bank_per_video: bool,
    /// Write a checkpoint carrying the bank as evolved during evaluation.
    #[arg(long)]
    persist_memory: bool,
    /// Dump the queries of every N-th scored frame (0 disables).
    #[arg(long, default_value_t = 16)]
    query_every: usize,
    /// Write per-pixel error maps as PGM images.
    #[arg(long)]
    error_maps: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frame_%06d.pgm files, optionally with labels.csv.
    #[arg(long)]
    frames: PathBuf,
    /// Directory for scores.csv.
    #[arg(long)]
    out: PathBuf,
    /// Normalize over the whole sequence after scoring instead of with
    /// running extremes.
    #[arg(long)]
    batch: bool,
    #[command(flatten)]
    gate: GateArgs,
}

fn parse_anomaly(s: &str) -> Result<AnomalyKind, String> {
    s.parse().map_err(|e: mnad::error::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: mnad::error::Error| e.to_string())
}

fn parse_scope(s: &str) -> Result<NormalizationScope, String> {
    s.parse().map_err(|e: mnad::error::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gendata(a) => gendata::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Score(a) => score::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
