use thiserror::Error;

use crate::solvers::SolveStats;

pub type Result<T> = std::result::Result<T, MonDeqError>;

#[derive(Debug, Error)]
pub enum MonDeqError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("strong-monotonicity margin must be positive and finite, got {0}")]
    InvalidMargin(f64),

    #[error("unsupported geometry: {0}")]
    Geometry(String),

    #[error("non-finite value in {0}")]
    NumericInput(&'static str),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{phase} solve did not converge in {} iterations (last update residual {:.3e})",
        .stats.iterations, .stats.last_residual())]
    NotConverged { phase: &'static str, stats: SolveStats },

    #[error("inverse was built for different parameters; rebuild it after every parameter update")]
    StaleInverse,

    #[error("inverse was built for alpha={built}, solver configured with alpha={requested}")]
    AlphaMismatch { built: f64, requested: f64 },

    #[error("invalid solver configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
