//! `mustan`: generate toy data, train, evaluate, predict and compare runs.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mustan::models::Arch;
use mustan::toygen::{Background, Lighting};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mustan::Error),
    #[error("{0}")]
    Message(String),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mustan", version, about = "Temporal-attention video foreground segmentation lab")]
pub struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration (a scene recipe for `generate`, a training config
    /// for `train`); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic toyset.
    Generate(GenerateArgs),
    /// Train a model and record a run.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write report files.
    Evaluate(EvaluateArgs),
    /// Write probability maps and binary masks for one video.
    Predict(PredictArgs),
    /// Compare the evaluated runs of a runs directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum LayoutArg {
    Auto,
    Cdnet,
    Simple,
}

/// Parses `HxW`.
fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Parses `N` or `MIN-MAX`.
fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok((p(a)?, p(b)?)),
        None => p(s).map(|n| (n, n)),
    }
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame size `HxW`; both must be multiples of 32.
    #[arg(long, value_parser = parse_hw)]
    pub size: Option<(usize, usize)>,
    /// Comma-separated backgrounds, cycled over videos.
    #[arg(long, value_delimiter = ',')]
    pub backgrounds: Vec<Background>,
    /// Comma-separated lighting conditions, cycled over videos.
    #[arg(long, value_delimiter = ',')]
    pub lighting: Vec<Lighting>,
    /// Maximum camera jitter in pixels.
    #[arg(long)]
    pub jitter: Option<usize>,
    /// Sprites per video, `N` or `MIN-MAX`.
    #[arg(long, value_parser = parse_range)]
    pub sprites: Option<(usize, usize)>,
    /// Sprite side length range, `N` or `MIN-MAX`.
    #[arg(long, value_parser = parse_range)]
    pub sprite_size: Option<(usize, usize)>,
    /// Draw sprite colours near the background palette.
    #[arg(long)]
    pub camouflage: bool,
    /// Replace an existing toyset in `--out`.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub layout: LayoutArg,
    /// Only supervise / score the frames listed in this file.
    #[arg(long)]
    pub frame_list: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Temporal window length.
    #[arg(long = "T")]
    pub window: Option<usize>,
    /// Channel width factor (1 reproduces the full widths).
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub step_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = parse_hw)]
    pub resolution: Option<(usize, usize)>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    #[arg(long)]
    pub frame_stride: Option<usize>,
    /// Give each MUSTAN2 frame its own encoder.
    #[arg(long)]
    pub distinct_encoders: bool,
    /// Weight archive with ImageNet ResNet18 parameters; enables pretraining.
    #[arg(long)]
    pub pretrained_weights: Option<PathBuf>,
    /// Run directory name (default: architecture plus timestamp).
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_parser = existing_file)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Label the report as out-of-domain.
    #[arg(long)]
    pub ood: bool,
    /// Report name (default `ood` or `in-domain`).
    #[arg(long)]
    pub name: Option<String>,
    /// Default: the run's training resolution, else 320x480.
    #[arg(long, value_parser = parse_hw)]
    pub resolution: Option<(usize, usize)>,
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Average the overall row over videos instead of categories.
    #[arg(long)]
    pub video_mean: bool,
    /// Output directory (default: the run's `reports/` directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long, value_parser = existing_file)]
    pub checkpoint: PathBuf,
    /// One video directory (`frames/`, `input/`, or images directly).
    #[arg(long)]
    pub video: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_hw)]
    pub resolution: Option<(usize, usize)>,
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run ids to include (default: all runs).
    pub runs: Vec<String>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
