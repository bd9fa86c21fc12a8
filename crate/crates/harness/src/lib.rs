//! Synthetic tasks, attack simulators and a seeded experiment runner for
//! robust conformal prediction.

pub mod attack;
pub mod experiment;
pub mod poison;
pub mod report;
pub mod task;

pub use attack::{evasion_attack, AttackGoal, AttackObjective, AttackOutcome, AttackSettings};
pub use experiment::{run_experiment, run_trial, ExperimentConfig, Method, MethodRecord, Study, TrialResult, TrialStatus};
pub use poison::{poison_features, poison_labels, PoisonedCalibration};
pub use report::{aggregate, write_results, AggregateRow, ExperimentReport};
pub use task::{generate_task, Dataset, SyntheticTask, TaskFamily, TaskSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] rcp_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "RCP_WORKERS";

/// Worker count from `RCP_WORKERS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
