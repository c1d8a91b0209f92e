use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("subject `{subject}` (data row {row}) has no entry in the covariate table")]
    MissingCovariate { subject: String, row: usize },

    #[error("covariate `{name}` has no observed levels")]
    EmptyCovariate { name: String },

    #[error("invalid record at row {row}: {reason}")]
    InvalidRecord { row: usize, reason: String },

    #[error("component {component} is identically zero and cannot be rescaled")]
    DegenerateComponent { component: usize },

    #[error("truncation mass of [{lower}, {upper}] underflows for location {mu} and scale {sd}")]
    NumericalUnderflow { mu: f64, sd: f64, lower: f64, upper: f64 },

    #[error("mixture weights do not form a probability vector: {0}")]
    InvalidWeights(String),

    #[error("correlation matrix is numerically singular (det = {det:e})")]
    SingularCorrelation { det: f64 },

    #[error("density grids differ: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset does not fit the requested mode: {0}")]
    IncompatibleData(String),

    #[error("invariant violated in {block}: {detail}")]
    InvariantViolation { block: String, detail: String },

    #[error("replicate count must be positive")]
    InvalidReplicateCount,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// True for failures that stem from floating point breakdown rather than
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalUnderflow { .. }
                | Error::SingularCorrelation { .. }
                | Error::InvariantViolation { .. }
        )
    }
}
