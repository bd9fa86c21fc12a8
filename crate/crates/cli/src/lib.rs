//! Command-line front end: configuration, file formats and subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "rcp", version, about = "Certified conformal prediction under evasion and poisoning")]
pub struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set alpha=0.05`. Repeatable;
    /// later values win.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate from smoothed calibration scores and labels.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Calibration artifact (JSON) to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build prediction sets for test scores with a calibration artifact.
    Predict {
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Optional test labels; enables the metrics in the report.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output directory for sets.csv and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Conservative threshold for a calibration set with up to `budget`
    /// poisoned points.
    CertifyPoisoning {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cross-check against exhaustive search (small instances only).
        #[arg(long)]
        oracle: bool,
    },
    /// Run a synthetic study and write a results directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the poisoning solvers with exhaustive search on random
    /// instances.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let load = || RunConfig::load(cli.config.as_deref(), &cli.overrides);
    match &cli.command {
        Command::Calibrate { scores, labels, out } => {
            let art = commands::calibrate(&load()?, scores, labels, out)?;
            println!(
                "threshold {} (clean {}), worst-case vanilla coverage {:.4}",
                art.predictor.threshold, art.predictor.clean_threshold, art.worst_case_coverage
            );
        }
        Command::Predict { calibration, scores, labels, out } => {
            let report = commands::predict(calibration, scores, labels.as_deref(), out)?;
            match &report.metrics {
                Some(m) => println!(
                    "{} points, coverage {:.4}, mean set size {:.4}",
                    m.count, m.empirical_coverage, m.avg_set_size
                ),
                None => println!("{} points", report.points),
            }
        }
        Command::CertifyPoisoning { instance, out, oracle } => {
            let cert = commands::certify_poisoning(&load()?, instance, out, *oracle)?;
            println!("certified threshold {} (observed {})", cert.certified.q_lower, cert.observed_quantile);
        }
        Command::Simulate { out } => {
            let report = commands::simulate(&load()?, out)?;
            println!("{} trials, {} aggregate rows written to {}", report.trials.len(), report.aggregate.len(), out.display());
        }
        Command::OracleCheck { instances, out } => {
            let report = commands::oracle_check(load()?.seed, *instances, out.as_deref())?;
            println!(
                "feature {} / {} agree, label {} / {} agree",
                report.feature.instances - report.feature.mismatches,
                report.feature.instances,
                report.label.instances - report.label.mismatches,
                report.label.instances
            );
        }
    }
    Ok(())
}
