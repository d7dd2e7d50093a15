//! `srde`: dictionary-filtering super-resolution from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::commands::{BenchArgs, Context, Oracle, TuneArgs, UpscaleArgs};
use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] srde_core::Error),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "srde", version, about = "Dictionary-filtering super-resolution toolkit")]
struct Cli {
    /// `key = value` settings file; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, env = "SRDE_SEED")]
    seed: Option<u64>,

    /// Upscaling factor (2, 3 or 4).
    #[arg(long, global = true)]
    scale: Option<usize>,

    /// Worker threads for the filtering engine.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the Gaussian/DoG filter dictionary.
    GenDict {
        #[arg(long)]
        out: PathBuf,
        /// Filter size (odd).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write randomly initialized predictor weights.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        /// Dictionary whose size sets the coefficient count.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        filters: Option<usize>,
    },
    /// Blur and decimate a high-resolution image.
    Degrade {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blur standard deviation in pixels.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Upscale an image and report per-stage timings.
    Upscale {
        input: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// `NX,NY,NZ` or `auto` to tune on this input.
        #[arg(long, default_value = "auto")]
        block: String,
        /// Evaluation budget for `--block auto`.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Stage timing CSV (stdout if omitted).
        #[arg(long)]
        timing: Option<PathBuf>,
        /// Tuning log CSV for `--block auto`.
        #[arg(long)]
        tune_log: Option<PathBuf>,
    },
    /// Shrink the dictionary against a directory of high-resolution images.
    Prune {
        dataset: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Final kept fraction of the dictionary.
        #[arg(long)]
        alpha: Option<f64>,
        /// Output directory for dict.srd, weights.srn and trace.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Search block configurations for the filtering engine.
    Tune {
        /// Data volume `HxWxC`.
        #[arg(long)]
        dims: Option<String>,
        /// Low-resolution image; the volume follows from the models.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "synthetic")]
        oracle: Oracle,
        #[arg(long)]
        budget: Option<usize>,
        /// Tuning log CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency and quality over sizes, scales and compression ratios.
    Bench {
        #[arg(long, default_value = "64x64,128x128,180x320,360x640")]
        sizes: String,
        #[arg(long, default_value = "2,3,4")]
        scales: String,
        #[arg(long, default_value = "1.0,0.8,0.6,0.4,0.2,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PSNR and SSIM between two images.
    Metrics { a: PathBuf, b: PathBuf },
    /// Element and byte counts of the filtering-stage operands.
    Footprint {
        #[arg(long)]
        height: u64,
        #[arg(long)]
        width: u64,
        #[arg(long, default_value_t = 72)]
        filters: u64,
        #[arg(long, default_value_t = 5)]
        k: u64,
    },
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.scale {
        config.set("scale", s);
    }
    if let Some(w) = cli.workers {
        config.set("hw.workers", w);
    }
    match &cli.command {
        Command::GenDict { k: Some(k), .. } => config.set("dict.k", k),
        Command::Prune { alpha: Some(a), .. } => config.set("prune.alpha_target", a),
        _ => {}
    }
    Ok(Context {
        config,
        seed: cli.seed.unwrap_or(0),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = context(&cli)?;
    match &cli.command {
        Command::GenDict { out, .. } => commands::gen_dict(&ctx, out),
        Command::InitWeights { out, dict, filters } => {
            commands::init_weights(&ctx, out, dict.as_deref(), *filters)
        }
        Command::Degrade { input, out, sigma } => commands::degrade_image(&ctx, input, out, *sigma),
        Command::Upscale {
            input,
            dict,
            weights,
            block,
            budget,
            out,
            timing,
            tune_log,
        } => commands::upscale_image(
            &ctx,
            UpscaleArgs {
                input,
                dict,
                weights,
                block,
                budget: *budget,
                out,
                timing: timing.as_deref(),
                tune_log: tune_log.as_deref(),
            },
        ),
        Command::Prune {
            dataset,
            dict,
            weights,
            out,
            ..
        } => commands::prune(&ctx, dataset, dict, weights, out),
        Command::Tune {
            dims,
            image,
            dict,
            weights,
            oracle,
            budget,
            out,
        } => commands::tune_blocks(
            &ctx,
            TuneArgs {
                dims: dims.as_deref(),
                image: image.as_deref(),
                dict: dict.as_deref(),
                weights: weights.as_deref(),
                oracle: *oracle,
                budget: *budget,
                out: out.as_deref(),
            },
        ),
        Command::Bench {
            sizes,
            scales,
            ratios,
            repeats,
            out,
        } => commands::bench(
            &ctx,
            BenchArgs {
                sizes,
                scales,
                ratios,
                repeats: *repeats,
                out: out.as_deref(),
            },
        ),
        Command::Metrics { a, b } => commands::metrics(a, b),
        Command::Footprint {
            height,
            width,
            filters,
            k,
        } => commands::footprint(&ctx, *height, *width, *filters, *k),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
