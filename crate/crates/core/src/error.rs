use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed delimited file {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("covariance of class `{0}` is not positive definite")]
    SingularCovariance(String),

    #[error("stream phase `{0}` matches no observations")]
    EmptyPhase(String),

    #[error("stream phase `{name}` wants {wanted} observations but only {available} remain")]
    InsufficientPhase {
        name: String,
        wanted: usize,
        available: usize,
    },

    #[error("stream plan leaves {0} observations unassigned")]
    StreamCoverage(usize),

    #[error("only {found} normal-condition observations match, {wanted} requested")]
    InsufficientNormal { wanted: usize, found: usize },

    #[error("feature {0} has zero standard deviation")]
    ZeroStd(usize),

    #[error("training data contains fewer than two classes")]
    SingleClass,

    #[error("objective became non-finite at EM iteration {0}")]
    NonFiniteObjective(usize),

    #[error("pruning removed every relevance vector")]
    DegenerateModel,

    #[error("state lies outside the prior support")]
    OutOfSupport,

    #[error("non-finite gradient at coordinate {0}")]
    NonFiniteGradient(String),

    #[error("initial state has non-finite log density")]
    NonFiniteInitialDensity,

    #[error("posterior has no draws")]
    EmptyPosterior,

    #[error("invalid categorical distribution: {0}")]
    InvalidDistribution(String),

    #[error("merge groups overlap on class {0}")]
    OverlappingGroups(usize),

    #[error("information efficiency needs at least two categories")]
    SingleCategory,

    #[error("label oracle failed: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
