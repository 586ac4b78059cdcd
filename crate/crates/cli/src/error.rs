use epsmooth::EstimateError;
use thiserror::Error;

/// Failures of a run, each tagged with the stage that produced it.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("[{stage}] invalid configuration: {message}")]
    Config { stage: &'static str, message: String },
    #[error("[{stage}] I/O error: {message}")]
    Io { stage: &'static str, message: String },
    #[error("[{stage}] solver did not converge: {message}")]
    NotConverged { stage: &'static str, message: String },
    #[error("[{stage}] constraints are infeasible: {message}")]
    Infeasible { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Io { .. } => 1,
            CliError::NotConverged { .. } => 2,
            CliError::Infeasible { .. } => 3,
        }
    }

    pub fn io(stage: &'static str, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            stage,
            message: err.to_string(),
        }
    }

    pub fn config(stage: &'static str, message: impl Into<String>) -> Self {
        CliError::Config {
            stage,
            message: message.into(),
        }
    }

    /// Maps an estimator failure onto the exit-code classes.
    pub fn from_estimate(stage: &'static str, err: EstimateError) -> Self {
        let message = err.to_string();
        match err {
            EstimateError::Infeasible { .. } => CliError::Infeasible { stage, message },
            EstimateError::TubeViolation { .. } | EstimateError::Qp(_) | EstimateError::SingularM => {
                CliError::NotConverged { stage, message }
            }
            EstimateError::Model(_) | EstimateError::NoMeasurements => CliError::Config { stage, message },
        }
    }
}
