use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the phrase-tagging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    RawIo(#[from] std::io::Error),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate document id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("span [{start}, {end}) out of bounds for sentence of {n_words} words")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        n_words: usize,
    },

    #[error("span [{start}, {end}) has length {len}; multi-word spans need at least 2 words")]
    SpanTooShort {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("attention for sentence {0} not found")]
    MissingKey(String),

    #[error("feature lookup failed for {} sentence(s): {}", .0.len(), .0.join(", "))]
    MissingFeatures(Vec<String>),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch in {what}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        what: String,
        stored: u32,
        computed: u32,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient labels: need at least {min} positive and {min} negative, got {positives} positive and {negatives} negative")]
    InsufficientLabels {
        min: usize,
        positives: usize,
        negatives: usize,
    },

    #[error("document id mismatch between gold and predictions: {}", .0.join(", "))]
    DocIdMismatch(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::RawIo(_) => "io",
            Error::MalformedLine { .. } => "malformed_line",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SpanOutOfBounds { .. } => "span_out_of_bounds",
            Error::SpanTooShort { .. } => "span_too_short",
            Error::MissingKey(_) => "missing_key",
            Error::MissingFeatures(_) => "missing_features",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Corrupt(_) => "corrupt",
            Error::NonFinite(_) => "non_finite",
            Error::InsufficientLabels { .. } => "insufficient_labels",
            Error::DocIdMismatch(_) => "doc_id_mismatch",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }
}
