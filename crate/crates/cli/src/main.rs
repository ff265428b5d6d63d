//! `quilt`: train small patch diffusion models and a coordinator that
//! stitches their outputs into larger or more heavily conditioned samples;
//! generate with trained or training-free methods and evaluate them.

mod config;
mod io;
mod stages;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::{resolve_out_dir, ConfigArgs, Method};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "quilt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base denoiser on the task's synthetic dataset.
    TrainBase(TrainBaseArgs),
    /// Train a coordinator against a frozen base checkpoint.
    TrainCoord(TrainCoordArgs),
    /// Generate samples with a chosen method.
    Sample(SampleArgs),
    /// Compute task metrics over sample directories.
    Eval(EvalArgs),
    /// Join metric tables from several eval runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainBaseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (relative paths resolve under $QUILT_OUT).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCoordArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Base checkpoint to coordinate (kept frozen).
    #[arg(long)]
    base_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Generation method.
    #[arg(long, value_enum)]
    method: Method,
    /// Number of parts: conditioning count (bump task) or patch count
    /// (1D tasks). Defaults to the configured l_test.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Guidance weight override (dde and rrr).
    #[arg(long)]
    w: Option<f64>,
    /// Number of samples to generate (defaults to eval.n_samples).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    base_ckpt: PathBuf,
    /// Coordinator checkpoint (required for --method dde).
    #[arg(long)]
    coord_ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sample directories produced by `quilt sample`; repeatable.
    #[arg(long = "samples", required = true)]
    samples: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// metrics.csv files or eval output directories; repeatable.
    #[arg(long = "inputs", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::TrainBase(args) => {
            let cfg = args.config.resolve()?;
            stages::run_train_base(&cfg, &resolve_out_dir(&args.out))
        }
        Command::TrainCoord(args) => {
            let cfg = args.config.resolve()?;
            stages::run_train_coord(&cfg, &args.base_ckpt, &resolve_out_dir(&args.out))
        }
        Command::Sample(args) => {
            let cfg = args.config.resolve()?;
            let opts = stages::SampleOpts {
                method: args.method,
                l: args.l.unwrap_or(cfg.grid.l_test),
                w: args.w,
                n: args.n,
                base_ckpt: args.base_ckpt,
                coord_ckpt: args.coord_ckpt,
            };
            stages::run_sample(&cfg, &opts, &resolve_out_dir(&args.out))
        }
        Command::Eval(args) => {
            let cfg = args.config.resolve()?;
            stages::run_eval(&cfg, &args.samples, &resolve_out_dir(&args.out))
        }
        Command::Compare(args) => stages::run_compare(&args.inputs, &resolve_out_dir(&args.out)),
    }
}
