use thiserror::Error;

use rcp_core::Error as CoreError;
use rcp_harness::HarnessError;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Missing, unreadable or malformed input.
    #[error("input error: {0}")]
    Input(String),

    /// An invariant or cross-check failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Conflicting or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Config(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => CliError::Config(e.to_string()),
            CoreError::BudgetExceeded { .. } => CliError::Invariant(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Core(c) => c.into(),
            HarnessError::Config(m) => CliError::Config(m),
            HarnessError::Invariant(m) => CliError::Invariant(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
