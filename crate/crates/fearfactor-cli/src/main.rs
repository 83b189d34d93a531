//! Command-line driver for the fear-factor estimation pipeline.
//!
//! Subcommands mirror the stages of the study: generate or ingest market
//! data, compute firm-level implied variances, extract the common fear
//! factors, estimate loadings, sort portfolios, and price the cross-section
//! with two-pass and three-pass regressions. `pipeline` chains every stage
//! after `synth`. Exit code 0 on success, 2 on invalid inputs or
//! configuration, 1 on runtime failure; failed stages leave no partial
//! outputs behind.

mod artifacts;
mod config;
mod errors;
mod stages;

use clap::{Parser, Subcommand};

use config::{ConfigFlags, RunConfig};
use errors::{runtime, validation, CliError};

#[derive(Parser)]
#[command(
    name = "fearfactor",
    version,
    about = "Option-implied fear factors: variance panels, common-factor extraction, \
             and cross-sectional pricing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic market (options, stocks, rates, style factors)
    Synth {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Validate raw input CSVs and write normalized copies into the output directory
    Ingest {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Compute the firm-day panel of total, good, and bad implied variances
    Iv {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Extract rolling common factors from the variance panel
    Factors {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Estimate rolling factor loadings for every stock
    Betas {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Sort stocks into loading portfolios and summarize their performance
    Sort {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Two-pass cross-sectional premium estimation
    Fmb {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Latent-factor three-pass premium estimation with the weak-factor test
    Threepass {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run ingest, iv, factors, betas, sort, fmb, and threepass in sequence
    Pipeline {
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

/// Honor the FEARFACTOR_THREADS cap before any parallel work starts.
fn init_threads() -> Result<(), CliError> {
    match std::env::var("FEARFACTOR_THREADS") {
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| {
                validation(format!(
                    "FEARFACTOR_THREADS must be a positive integer, got '{raw}'"
                ))
            })?;
            if n == 0 {
                return Err(validation(
                    "FEARFACTOR_THREADS must be a positive integer, got '0'",
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| runtime(format!("cannot size the thread pool: {e}")))
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(validation(format!("FEARFACTOR_THREADS: {e}"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (flags, stage): (&ConfigFlags, fn(&RunConfig) -> Result<(), CliError>) =
        match &cli.command {
            Command::Synth { flags } => (flags, stages::run_synth),
            Command::Ingest { flags } => (flags, stages::run_ingest),
            Command::Iv { flags } => (flags, stages::run_iv),
            Command::Factors { flags } => (flags, stages::run_factors),
            Command::Betas { flags } => (flags, stages::run_betas),
            Command::Sort { flags } => (flags, stages::run_sort),
            Command::Fmb { flags } => (flags, stages::run_fmb),
            Command::Threepass { flags } => (flags, stages::run_threepass),
            Command::Pipeline { flags } => (flags, stages::run_pipeline),
        };
    let cfg = RunConfig::resolve(flags)?;
    stage(&cfg)
}

fn main() {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(cli));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
