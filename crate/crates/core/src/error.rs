use std::ops::Range;

use crate::netspec::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {}", format_violations(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {path}: nonlinearity applied to a non-Gaussian input")]
    NotGaussian { path: String },

    #[error("node {path}: {message}")]
    Representation { path: String, message: String },

    #[error("matrix is not positive definite after regularization (minimum eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("training time must be non-negative, got {0}")]
    NegativeTime(f64),

    #[error("integration failed at t = {t}: {reason}")]
    Integrator { t: f64, reason: String },

    #[error("training diverged at step {step} (loss {loss:e})")]
    Diverged { step: usize, loss: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("block rows {rows:?} x cols {cols:?}: {source}")]
    Block {
        rows: Range<usize>,
        cols: Range<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the numbers rather than by the inputs' structure.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } | Error::Integrator { .. } | Error::Diverged { .. } => true,
            Error::Block { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
