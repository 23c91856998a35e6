//! `latentdecode`: reproducible latent decoding and reconstruction runs.
//!
//! Every command reads one flat config file, writes only under its output
//! directory, and seals a manifest of SHA-256 checksums; rerunning with an
//! identical config yields byte-identical artifacts.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::CommandContext;
use config::ExperimentConfig;
use latentdecode::error::{Error, ErrorCategory, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "latentdecode",
    version,
    about = "Latent decoding, image reconstruction, and ROI analysis toolkit"
)]
struct Cli {
    /// Flat sectioned config file driving the run.
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides [output] dir from the config.
    #[arg(long, value_name = "DIR", global = true)]
    output: Option<PathBuf>,

    /// Worker threads; falls back to LATENTDECODE_THREADS, then all cores.
    #[arg(long, value_name = "N", global = true)]
    threads: Option<usize>,

    /// Progress notes on stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Invert images into (instance, noise, dense) latent triples.
    Extract,
    /// Train the three ridge decoders from responses and latents.
    Fit,
    /// Predict latents from test responses and render reconstructions.
    Decode,
    /// Score reconstructions against ground-truth images.
    Evaluate,
    /// Weight maps and ROI-maximizing images from trained decoders.
    Roi,
    /// Full closed-loop run on a synthetic linear brain.
    Synthetic,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("LATENTDECODE_THREADS") {
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| Error::Config {
                detail: format!("LATENTDECODE_THREADS: cannot parse {raw:?} as a thread count"),
            })?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Config {
                detail: "thread count must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config {
                detail: format!("thread pool: {e}"),
            })?;
    }

    let config_path = cli.config.as_deref().ok_or_else(|| Error::Config {
        detail: "--config PATH is required".into(),
    })?;
    let config = ExperimentConfig::load(config_path)?;
    let out_dir = cli
        .output
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config {
            detail: "no output directory: set [output] dir or pass --output".into(),
        })?;
    let ctx = CommandContext {
        config,
        out_dir,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Extract => commands::cmd_extract(&ctx),
        Command::Fit => commands::cmd_fit(&ctx),
        Command::Decode => commands::cmd_decode(&ctx),
        Command::Evaluate => commands::cmd_evaluate(&ctx),
        Command::Roi => commands::cmd_roi(&ctx),
        Command::Synthetic => commands::cmd_synthetic(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let (kind, code) = match e.category() {
            ErrorCategory::Config => ("config", 2),
            ErrorCategory::Data => ("data", 3),
            ErrorCategory::Numeric => ("numeric", 4),
        };
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error kind={kind} exit={code} msg={msg:?}");
        std::process::exit(code);
    }
}
