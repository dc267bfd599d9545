//! `bpr`: simulate cohorts, fit the profile-regression model, run
//! bias/coverage studies, assign cluster memberships and export heatmap data.

mod cohort_csv;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::FitterKind;

#[derive(Parser)]
#[command(name = "bpr", version, about = "Bayesian profile regression toolkit")]
struct Cli {
    /// Seed override; also settable via BPR_SEED (flag wins).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap; also settable via BPR_THREADS (flag wins).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV plus ground truth and schema files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Fit the model to a cohort CSV and write a fit artifact and heatmaps.
    Fit {
        cohort: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Fit each level of this column separately.
        #[arg(long)]
        stratify: Option<String>,
    },
    /// Run the replicate bias/coverage study from a study config.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Comma-separated batch fractions, e.g. 0.01,0.1,1.0.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, value_enum, default_value_t = FitterKind::Svi)]
        fitter: FitterKind,
    },
    /// Compute per-row cluster responsibilities from a fit artifact.
    Assign {
        artifact: PathBuf,
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Re-export the heatmap CSV from a fit artifact.
    ExportHeatmap {
        artifact: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit probabilities instead of log-odds.
        #[arg(long)]
        linear: bool,
        /// Expected-membership count below which clusters are dropped.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(threads) = commands::parse_threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let seed = commands::parse_seed(cli.seed)?;
    match &cli.command {
        Command::Simulate { config, out, force } => commands::simulate(config, out, seed, *force),
        Command::Fit {
            cohort,
            config,
            out,
            force,
            stratify,
        } => commands::fit_cmd(cohort, config, out, seed, *force, stratify.as_deref()),
        Command::Study {
            config,
            out,
            force,
            sweep,
            fitter,
        } => commands::study(config, out, seed, *force, sweep.as_deref(), *fitter),
        Command::Assign {
            artifact,
            cohort,
            out,
            force,
        } => commands::assign(artifact, cohort, out, *force),
        Command::ExportHeatmap {
            artifact,
            out,
            linear,
            threshold,
            force,
        } => commands::export_heatmap(artifact, out, *linear, *threshold, *force),
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<bpr::BprError>() {
        Some(bpr::BprError::Numerical(_)) => commands::EXIT_NUMERICAL,
        _ => commands::EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
