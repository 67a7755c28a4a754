use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown stimulus {0}")]
    UnknownStimulus(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("observation for driver {found:?} added to state of driver {expected:?}")]
    DriverMismatch { expected: String, found: String },

    #[error("quantile must lie strictly between 0 and 1, got {0}")]
    InvalidQuantile(f64),

    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("optimizer did not converge after {iterations} iterations")]
    DidNotConverge { iterations: usize },

    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
