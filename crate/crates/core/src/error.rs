use thiserror::Error;

/// Errors raised across loading, model building, fitting and post-estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("column '{0}' has a degenerate scale (fewer than two distinct values)")]
    DegenerateScale(String),

    #[error("type error: {0}")]
    Type(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model specification error: {0}")]
    Spec(String),

    #[error("fixed-effects design is rank deficient at term '{term}'")]
    Collinearity { term: String },

    #[error("covariance of cluster '{cluster}' is not positive definite")]
    Conditioning { cluster: String },

    #[error("parameter on the boundary of its space: {0}")]
    Boundary(String),

    #[error(
        "optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        trace: Vec<TraceEntry>,
    },

    #[error("test unavailable: {0}")]
    TestUnavailable(String),

    #[error("wrong model for this statistic: {0}")]
    WrongModel(String),

    #[error("data alignment error: {0}")]
    Alignment(String),

    #[error(
        "likelihood-ratio statistic is negative ({0:.6}); the larger model may not have converged"
    )]
    ConvergenceSuspect(f64),

    #[error("internal error: {0}")]
    Internal(String),
}

/// One optimizer iteration, kept for non-convergence diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
