//! `dehaze` — command-line driver for the dehazing toolkit.
//!
//! Subcommands: `synth` (build a paired hazy/clean dataset), `train`
//! (semi-supervised mean-teacher training), `dehaze` (batch inference),
//! `eval` (PSNR/SSIM over a manifest), `inspect` (checkpoint/manifest
//! summaries). Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dehaze_core::Error;

use config::TrainOverrides;

#[derive(Parser)]
#[command(
    name = "dehaze",
    version,
    about = "Physics-based single-image dehazing: synthesize data, train, infer, evaluate",
    after_help = "Relative output paths resolve against $DEHAZE_OUT_ROOT when it is set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired hazy/clean dataset with transmission and depth.
    Synth(SynthArgs),
    /// Train the dehazing network (optionally with unlabeled images).
    Train(TrainArgs),
    /// Dehaze every image in a directory.
    Dehaze(DehazeArgs),
    /// Score a checkpoint against a manifest's ground truth.
    Eval(EvalArgs),
    /// Summarize a checkpoint or a manifest.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the manifest and sample files.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of clean images to hazify; omitted means procedural scenes.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of procedural clean images (ignored with --input).
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    /// Haze settings drawn per clean image.
    #[arg(long, default_value_t = 4)]
    pub settings: usize,
    /// Procedural image height in pixels.
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    /// Procedural image width in pixels.
    #[arg(long, default_value_t = 240)]
    pub width: usize,
    /// RNG seed; one seed reproduces the dataset bit for bit.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw atmospheric light per channel instead of one shared value.
    #[arg(long)]
    pub per_channel_atmosphere: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags below override individual fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint. Its embedded settings govern the run;
    /// only --t-max (to extend the horizon), paths, and the logging
    /// intervals still apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args)]
pub struct DehazeArgs {
    /// Checkpoint to run inference with.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of hazy images (png/jpg).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for dehazed images.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write input|output[|ground-truth] comparison panels.
    #[arg(long)]
    pub panels: bool,
    /// Directory of ground-truth images matched by file name (panels only).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Fail on the first unreadable image instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest of the test split (file names resolve next to it).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the hazy inputs themselves: the floor a model must beat.
    #[arg(long)]
    pub baseline_noop: bool,
    /// Score after rounding through 8-bit levels, as PNG pipelines do.
    #[arg(long)]
    pub quantized: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint to summarize.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Manifest to summarize.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Configuration mistakes exit 2 (like flag parse errors); failures during
/// a structurally valid run exit 1.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => commands::run_synth(args),
        Command::Train(args) => commands::run_train(args),
        Command::Dehaze(args) => commands::run_dehaze(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Inspect(args) => commands::run_inspect(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
