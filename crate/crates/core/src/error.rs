use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A malformed CSV row, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("oracle failed: {0}")]
    Oracle(String),

    #[error("invalid accounting plan: {0}")]
    Plan(String),

    #[error("unsupported mechanism: {0}")]
    UnsupportedMechanism(String),

    #[error("target epsilon {target} not reachable for sigma in [{lo}, {hi}]")]
    CalibrationRange { target: f64, lo: f64, hi: f64 },

    #[error("step fusion failed: {0}")]
    Fusion(String),

    #[error("clipping contract violated: contribution norm {norm} exceeds bound {bound}")]
    ClippingContract { norm: f64, bound: f64 },

    #[error("trust model: {0}")]
    TrustModel(String),

    #[error("fixed-point overflow: |x|*scale = {scaled} exceeds headroom limit {limit}")]
    Overflow { scaled: f64, limit: f64 },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("incompatible model provenance: {0}")]
    Provenance(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{} malformed row(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    MalformedRows(Vec<RowError>),

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
