use std::path::Path;

use polarity::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),

    #[error("config: {0}")]
    Config(String),

    #[error("no steady state: {0}")]
    NoSteadyState(String),

    #[error("{0}")]
    Numerical(String),

    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// 0 success, 1 I/O or config, 2 no steady state, 3 solver or
    /// estimator failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Config(_) => 1,
            CliError::NoSteadyState(_) => 2,
            CliError::Numerical(_) | CliError::NotConverged(_) => 3,
        }
    }
}

fn innermost(e: &CoreError) -> &CoreError {
    match e {
        CoreError::Tube { source, .. } => innermost(source),
        other => other,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match innermost(&e) {
            CoreError::Io(_) | CoreError::Csv(_) | CoreError::Parse { .. } => CliError::Io(message),
            CoreError::InvalidInput(_) | CoreError::LengthMismatch(..) | CoreError::TooFewReplicates(_) => {
                CliError::Config(message)
            }
            CoreError::NoSteadyState { .. } => CliError::NoSteadyState(message),
            CoreError::NotConverged(_) => CliError::NotConverged(message),
            _ => CliError::Numerical(message),
        }
    }
}
