use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no features found: {0}")]
    NoFeatures(String),

    #[error("rank-deficient fit: parameter `{parameter}` is not determined by the data")]
    RankDeficient { parameter: String },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("degenerate cross: {horizontal} horizontal and {vertical} vertical sections usable (need 3 each)")]
    DegenerateCross { horizontal: usize, vertical: usize },

    #[error("label decode failed: {0}")]
    LabelDecode(String),

    #[error("waveguide axis needs at least 3 valid sections, got {0}")]
    TooFewSections(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("underdetermined transform: {0} matched crosses (need at least 2)")]
    Underdetermined(usize),

    #[error("ill-conditioned design: {0}")]
    Conditioning(String),

    #[error("peak lies at the edge of the spectrum (index {index} of {len})")]
    PeakAtEdge { index: usize, len: usize },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
