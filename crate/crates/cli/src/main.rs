//! `rcdet`: generate data, train, evaluate, ablate, benchmark and detect.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcdet::detector::Variant;

/// Exit status for invalid invocations.
const EXIT_USAGE: u8 = 2;
/// Exit status for failures while running a valid command.
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "rcdet",
    version,
    about = "Desk-scale detector with CAFM and RCM blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with a 7:2:1 split file.
    Gen(GenArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the report files.
    Eval(EvalArgs),
    /// Train and evaluate all four variants with one seed and budget.
    Ablate(AblateArgs),
    /// Parameter count, GFLOPs and FPS of a model.
    Bench(BenchArgs),
    /// Run a checkpoint on images and write per-image detections.
    Detect(DetectArgs),
}

/// Options shared by commands that train.
#[derive(Args, Debug, Clone)]
struct TrainOpts {
    /// Dataset root with images/ and labels/ (and optionally split.txt).
    #[arg(long)]
    data: PathBuf,
    /// key = value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Falls back to the config file, then RCDET_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    /// Falls back to RCDET_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 160)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// base, cafm, rcm or cr; overrides the config file.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint must have been trained with this config's model settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Seed of the split when the dataset has no split file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Benchmark a trained checkpoint.
    #[arg(long, conflicts_with = "variant")]
    ckpt: Option<PathBuf>,
    /// Benchmark a freshly initialized model of this variant.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Also write bench.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.6)]
    nms_iou: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also save images with the boxes drawn.
    #[arg(long)]
    render: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Eval(a) => commands::eval(&a, &argv),
        Command::Ablate(a) => commands::ablate(&a, &argv),
        Command::Bench(a) => commands::bench(&a, &argv),
        Command::Detect(a) => commands::detect(&a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let usage = matches!(e, rcdet::Error::Argument(_));
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
