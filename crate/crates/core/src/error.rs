use thiserror::Error;

/// Errors raised by the optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {0} is not -1 or +1")]
    InvalidLabel(f64),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("gradient vanishes at the initial point")]
    ZeroGradient,

    #[error("backtracking diverged (M = {0:e})")]
    BacktrackOverflow(f64),

    #[error("type-II subproblem solver did not converge")]
    NoConvergence,

    #[error("estimate-sequence parameter diverged (lambda = {0:e})")]
    LambdaOverflow(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
