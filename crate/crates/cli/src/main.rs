//! `pointcaps` command-line tool.
//!
//! Every subcommand prints one `key=value` summary line on stdout, progress
//! and tables on stderr, and exits non-zero on any error.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pointcaps::model::RoutingMode;
use pointcaps::train::NoiseMode;

#[derive(Parser, Debug)]
#[command(name = "pointcaps", version, about = "Capsule autoencoder for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shape dataset with a manifest.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Classification accuracy and reconstruction error of a checkpoint.
    Eval(EvalArgs),
    /// Robustness sweep under Gaussian noise or outliers.
    Sweep(SweepArgs),
    /// Decode a cloud while sweeping one latent dimension.
    Perturb(PerturbArgs),
    /// Per-point part-capsule assignments.
    Parts(PartsArgs),
    /// Run the oracle, gradient and invariant checks.
    Verify(VerifyArgs),
    /// Parameter and multiply-add counts per layer.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Micro,
    Tiny,
    Paper,
}

/// Where the model architecture comes from.
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Config file in `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in architecture used when no config file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override one config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Shape kinds, in label order.
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,cylinder,torus,plane")]
    shapes: Vec<String>,
    /// Training clouds per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Test clouds per class.
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Amplitude of the per-sample shape variation.
    #[arg(long, default_value_t = 0.2)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset root holding `manifest.csv`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Fractions of the run after which the learning rate drops tenfold.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.9")]
    milestones: Vec<f64>,
    /// Fraction of the training split held out for model selection.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Plain adaptive-moment updates instead of the rectified ones.
    #[arg(long)]
    no_rectify: bool,
    /// Routing ablation arm: pointcaps, all_dr or all_er.
    #[arg(long, value_parser = parse_routing)]
    routing: Option<RoutingMode>,
    /// Disable the decoder skip connection.
    #[arg(long)]
    no_skip: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Config file; defaults to `config.txt` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also score the medoid-of-class reference reconstruction.
    #[arg(long)]
    baseline: bool,
    /// Fit the capsule-to-part map on this fraction of the training split
    /// and report segmentation scores.
    #[arg(long)]
    seg_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_parser = parse_noise_mode, default_value = "perturb")]
    mode: NoiseMode,
    /// Noise levels: standard deviations or outlier counts.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// One noise draw per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Standard deviation of the outlier distribution.
    #[arg(long, default_value_t = 0.2)]
    outlier_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Cloud file to encode.
    #[arg(long)]
    input: PathBuf,
    /// Latent dimension to vary.
    #[arg(long)]
    dim: usize,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-5.0, 5.0])]
    range: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PartsArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Cloud files to label.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    /// Label clouds of a dataset instead.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Label at most this many dataset clouds.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Fewer cases and seeds, for a fast smoke run.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Points per cloud for presets.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Classes for presets.
    #[arg(long, default_value_t = 40)]
    classes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_routing(s: &str) -> Result<RoutingMode, String> {
    s.parse().map_err(|e: pointcaps::Error| e.to_string())
}

fn parse_noise_mode(s: &str) -> Result<NoiseMode, String> {
    s.parse().map_err(|e: pointcaps::Error| e.to_string())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POINTCAPS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("POINTCAPS_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Parts(a) => commands::parts(a),
        Command::Verify(a) => commands::verify(a),
        Command::Stats(a) => commands::stats(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
