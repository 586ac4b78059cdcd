use thiserror::Error;

/// Which weight matrix failed a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightName {
    P,
    Q,
    R,
}

impl std::fmt::Display for WeightName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            WeightName::P => "P",
            WeightName::Q => "Q",
            WeightName::R => "R",
        };
        f.write_str(s)
    }
}

/// Errors raised while validating or assembling a problem.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("weight {0} is not symmetric positive definite")]
    NotPositiveDefinite(WeightName),
    #[error("epsilon must be strictly positive in every channel (channel {channel} is {value})")]
    NonPositiveEpsilon { channel: usize, value: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl ModelError {
    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        ModelError::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

/// Errors from the dense QP solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP Hessian is not symmetric (max asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("QP dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("QP Hessian could not be factored even after ridge regularization")]
    Factorization,
    #[error("tolerance must be positive")]
    BadTolerance,
}

/// Errors from the estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("at least one measurement is required")]
    NoMeasurements,
    #[error("constraint set is infeasible (dual multipliers diverged to norm {xi_norm:e})")]
    Infeasible { xi_norm: f64 },
    #[error("slack eta left the epsilon tube by {violation:e} at k={k}, channel {channel}; the dual solve is not accurate")]
    TubeViolation {
        k: usize,
        channel: usize,
        violation: f64,
    },
    #[error("matrix M is not positive definite")]
    SingularM,
}

/// Errors from the verification tools.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("primal problem is infeasible")]
    Infeasible,
    #[error("primal oracle did not converge (residual {0:e})")]
    NotConverged(f64),
    #[error("oracle problem has {vars} decision variables, above the limit of {limit}")]
    ScaleGuard { vars: usize, limit: usize },
    #[error("estimate carries no dual variables")]
    MissingDual,
}
