use thiserror::Error;

/// Errors produced by the estimation routines.
#[derive(Debug, Error)]
pub enum SurError {
    #[error("dimension mismatch in equation {equation}: {detail}")]
    DimensionMismatch { equation: usize, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("design matrix of equation {equation} is rank deficient; dependent columns {columns:?}")]
    RankDeficient { equation: usize, columns: Vec<usize> },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("singular covariance estimate; eigenvalues {eigenvalues:?}")]
    SingularCovariance { eigenvalues: Vec<f64> },

    #[error("column {column} has zero MADN (constant column)")]
    ZeroScale { column: usize },

    #[error("degenerate data: {reason}")]
    Degenerate { reason: String, location: Option<Vec<f64>> },

    #[error("missing-data pattern does not identify the scatter: {0}")]
    Unidentifiable(String),

    #[error("quadrature did not converge (achieved error estimate {achieved:e})")]
    QuadratureFailed { achieved: f64 },

    #[error("root bracket failed on interval [{lo}, {hi}]")]
    BracketFailed { lo: f64, hi: f64 },

    #[error("correlation construction failed after {sweeps} sweeps (condition number {achieved_cn})")]
    CorrelationFailed { sweeps: usize, achieved_cn: f64 },

    #[error("subsampling failed: {0}")]
    Subsampling(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("model specification: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SurError>;
