use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid variable catalog: {0}")]
    InvalidCatalog(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("insufficient data span: {0}")]
    InsufficientData(String),
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    TruncatedFile { path: PathBuf, expected: u64, found: u64 },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("missing model for lead {0} days")]
    MissingModel(u32),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization error: {0}")]
    Serde(String),
}

/// Broad failure classes, used by the command-line driver to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidGrid(_) | Error::InvalidCatalog(_) => ErrorClass::Config,
            Error::NonFinite(_) | Error::Divergence(_) | Error::UndefinedMetric(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    /// Short stable identifier for machine-parseable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidCatalog(_) => "invalid_catalog",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::MissingData(_) => "missing_data",
            Error::InsufficientData(_) => "insufficient_data",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedFile { .. } => "truncated_file",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::MissingModel(_) => "missing_model",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}
