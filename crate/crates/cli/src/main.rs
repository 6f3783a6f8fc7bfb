use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_prune::{Criterion, ErrorKind, FitnessKind, Parity};

mod commands;
mod lock;

/// Layer-wise expert pruning for toy mixture-of-experts models.
#[derive(Debug, Parser)]
#[command(name = "moe-prune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a model spec, build its weights and write the spec with its hashes.
    GenModel {
        spec: PathBuf,
        /// Override the spec's weight seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Score every expert on calibration data and write the pruning order.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "reap")]
        criterion: Criterion,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Cache the full model's next-token distributions at every answer position.
    CacheLogits {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a run manifest recording the hash of every search input.
    MakeManifest(ManifestArgs),
    /// Evolutionary search for the best per-layer allocation.
    Search {
        manifest: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory; defaults to the manifest's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an allocation against the uniform one under several fitness measures.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        order: PathBuf,
        #[arg(long)]
        allocation: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "esap,sap,kl,nll")]
        fitness: Vec<FitnessKind>,
        /// Parity of the uniform baseline.
        #[arg(long, default_value = "any")]
        parity: Parity,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every feasible allocation exhaustively.
    BruteForce {
        manifest: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        limit: usize,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ManifestArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "reap")]
    criterion: Criterion,
    #[arg(long)]
    order: PathBuf,
    #[arg(long)]
    budget: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory recorded in the manifest for search results.
    #[arg(long, default_value = "run")]
    output_dir: PathBuf,
    /// Where to write the manifest; paths inside it are stored relative to its directory.
    #[arg(long, default_value = "manifest.json")]
    out: PathBuf,
}

/// Flags that override the manifest's search config.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parity: Option<Parity>,
    #[arg(long)]
    fitness: Option<FitnessKind>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<moe_prune::Error>())
        .map(moe_prune::Error::kind);
    match kind {
        Some(ErrorKind::Validation) | None => 2,
        Some(ErrorKind::Staleness) => 3,
        Some(ErrorKind::Size) => 4,
        Some(ErrorKind::Io) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
