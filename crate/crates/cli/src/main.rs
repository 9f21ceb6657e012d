//! `tpnet` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric, 6 I/O.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpnet::{Error, ErrorClass};

use commands::{Sources, TrainArgs};

#[derive(Parser)]
#[command(
    name = "tpnet",
    version,
    about = "No-reference quality assessment for super-resolved images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest; writes checkpoints, history and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict one score per image; writes `scores.csv` (id,predicted).
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        images: Vec<PathBuf>,
    },
    /// PLCC/SRCC of a scores CSV against manifest MOS; writes `metrics.json`.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-stage spatial attention maps as grayscale PNGs.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        image: PathBuf,
    },
    /// PSNR and SSIM between same-named images of two directories.
    Baseline {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a degraded dataset with pseudo-MOS labels.
    Synth {
        /// Directory of source images.
        #[arg(long, conflicts_with = "patterns")]
        sources: Option<PathBuf>,
        /// Generate this many procedural sources instead.
        #[arg(long)]
        patterns: Option<usize>,
        #[arg(long, default_value_t = 256)]
        size: u32,
        /// JSON `{"kinds": [...], "severities": [...]}`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 3,
        ErrorClass::Data => 4,
        ErrorClass::Numeric => 5,
        ErrorClass::Io => 6,
    }
}

fn run(cli: Cli) -> tpnet::Result<()> {
    match cli.command {
        Command::Train {
            config,
            manifest,
            seed,
            out,
            checkpoint,
        } => commands::train(TrainArgs {
            config: config.as_deref(),
            manifest: manifest.as_deref(),
            seed,
            out: out.as_deref(),
            checkpoint: checkpoint.as_deref(),
        }),
        Command::Score {
            checkpoint,
            manifest,
            out,
            images,
        } => commands::score(&checkpoint, manifest.as_deref(), &images, &out),
        Command::Eval { scores, manifest, out } => commands::eval(&scores, &manifest, &out).map(drop),
        Command::Attention { checkpoint, out, image } => commands::attention(&checkpoint, &image, &out).map(drop),
        Command::Baseline { reference, test, out } => commands::baseline(&reference, &test, &out).map(drop),
        Command::Synth {
            sources,
            patterns,
            size,
            grid,
            seed,
            out,
        } => {
            let sources = match (&sources, patterns) {
                (Some(dir), _) => Sources::Dir(dir),
                (None, Some(count)) => Sources::Patterns { count, size },
                (None, None) => return Err(Error::Config("pass --sources or --patterns".into())),
            };
            commands::synth(sources, &grid, seed, &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
