use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the library, split so callers can
/// distinguish I/O failures from format problems and from numeric breakdown.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not an array file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: unsupported dtype code {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: u8 },
    #[error("{path}: truncated payload")]
    Truncated { path: PathBuf },
    #[error("{path}: trailing bytes after payload")]
    TrailingData { path: PathBuf },
    #[error("zero-sized dimension in array shape {dims:?}")]
    ZeroSizedDim { dims: Vec<u64> },
    #[error("{path}: manifest error: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
    #[error("{0} is not symmetric positive definite")]
    NotSpd(String),
    #[error("negative occupancy count {value} at component {index}")]
    NegativeCount { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {num_languages} languages")]
    LabelOutOfRange { label: i64, num_languages: usize },
    #[error("segment {0} has no language label")]
    UnlabeledSegment(usize),
    #[error("language {0} has no segments")]
    EmptyClass(usize),
    #[error("labels are required but missing")]
    MissingLabels,
    #[error("unknown scorer '{0}'")]
    UnknownScorer(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training bound decreased at iteration {iter}: {previous} -> {current}")]
    BoundDecreased {
        iter: usize,
        previous: f64,
        current: f64,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn manifest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Manifest {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(
        what: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
