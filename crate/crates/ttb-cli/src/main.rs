//! `ttb`: batch front-end for Bayesian tensor-train completion.
//!
//! Subcommands: `synth` (seeded synthetic benchmarks), `complete` (run the
//! solver on a tensor+mask or an image+plan), `metrics` (RSE/PSNR/SSIM
//! between two tensors or images), `augment` / `deaugment` (image folding).
//!
//! Exit codes for `complete`: 0 converged, 2 stopped at the iteration cap,
//! 1 failure. Diagnostics go to stderr; with `--stdout` the report JSON is
//! the only thing written to stdout.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ttb", version, about = "Bayesian tensor-train factorization and completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank tensor with noise and a mask.
    Synth(SynthArgs),
    /// Fit the model to observed data and write the reconstruction.
    Complete(CompleteArgs),
    /// Compute RSE/PSNR/SSIM between two tensors or images.
    Metrics(MetricsArgs),
    /// Fold an image into a tensor using a plan file.
    Augment(AugmentArgs),
    /// Invert a folding plan back to an image.
    Deaugment(DeaugmentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Mode sizes, e.g. 20,20,20
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    /// True interface ranks, e.g. 1,5,5,1
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    /// Signal-to-noise ratio in dB (omit for noiseless)
    #[arg(long)]
    snr: Option<f64>,
    /// Per-element noise variance (alternative to --snr)
    #[arg(long, conflicts_with = "snr")]
    noise_var: Option<f64>,
    /// Missing rate in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    /// Base seed; generated and recorded in the manifest when omitted
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeded repetitions (seeds seed..seed+repeat)
    #[arg(long, default_value_t = 1)]
    repeat: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct CompleteArgs {
    /// Observed tensor (.ttn)
    #[arg(long, required_unless_present = "image")]
    input: Option<std::path::PathBuf>,
    /// Observation mask (.ttm)
    #[arg(long)]
    mask: Option<std::path::PathBuf>,
    /// Observed image (.pgm/.ppm); requires --plan
    #[arg(long, requires = "plan")]
    image: Option<std::path::PathBuf>,
    /// 0/1 mask image aligned with --image
    #[arg(long)]
    mask_image: Option<std::path::PathBuf>,
    /// Augmentation plan (JSON)
    #[arg(long)]
    plan: Option<std::path::PathBuf>,
    /// Reconstruction output (.ttn)
    #[arg(long)]
    output: Option<std::path::PathBuf>,
    /// Reconstructed image output (.pgm/.ppm)
    #[arg(long)]
    output_image: Option<std::path::PathBuf>,
    /// Fit report (JSON)
    #[arg(long)]
    report: Option<std::path::PathBuf>,
    /// Per-iteration diagnostics (CSV: iter, ranks, rse, e_tau)
    #[arg(long)]
    csv: Option<std::path::PathBuf>,
    /// Key-value config file (JSON); flags override its entries
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Print the report JSON to stdout
    #[arg(long)]
    stdout: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    prune_ratio: Option<f64>,
    /// Observed fraction at or above which the fast path is used
    #[arg(long)]
    fast_path_fraction: Option<f64>,
    /// Cap on initial interface ranks as a multiple of each mode size
    #[arg(long)]
    rank_cap_multiplier: Option<usize>,
    /// Equalize initial core norms (always on for image inputs)
    #[arg(long)]
    balance_cores: bool,
    /// Seed for the missing-entry fill
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default 1; TTB_THREADS as fallback)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference tensor (.ttn) or image (.pgm/.ppm)
    #[arg(long, required = true)]
    truth: std::path::PathBuf,
    /// Estimate with the same format
    #[arg(long, required = true)]
    estimate: std::path::PathBuf,
    /// Write the metric JSON here instead of stdout
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long, required = true)]
    image: std::path::PathBuf,
    #[arg(long, required = true)]
    plan: std::path::PathBuf,
    #[arg(long, required = true)]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct DeaugmentArgs {
    #[arg(long, required = true)]
    input: std::path::PathBuf,
    #[arg(long, required = true)]
    plan: std::path::PathBuf,
    #[arg(long, required = true)]
    out: std::path::PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Complete(args) => return commands::complete(args),
        Command::Metrics(args) => commands::metrics(args),
        Command::Augment(args) => commands::augment(args),
        Command::Deaugment(args) => commands::deaugment(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
