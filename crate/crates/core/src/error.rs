//! Error type shared across the crate.

use std::fmt;

/// Unified error for every fallible operation in this crate.
///
/// Variants are grouped by what went wrong rather than where, so callers
/// (notably the CLI) can map them onto exit categories: usage problems,
/// bad data, or numeric failures.
#[derive(Debug)]
pub enum KprError {
    /// Matrix or vector dimensions do not agree.
    Shape(String),
    /// An argument value is outside its allowed range.
    Parameter(String),
    /// User-supplied input is invalid (empty text, unknown id, ...).
    Input(String),
    /// A character span does not align with token boundaries.
    Alignment(String),
    /// A corpus document is malformed.
    Corpus(String),
    /// An entity has no passages to embed from.
    Coverage(String),
    /// A vector cannot be rescaled to the reference norm.
    Normalization(String),
    /// A computation produced non-finite or degenerate values.
    Numeric(String),
    /// A training batch is malformed.
    Batch(String),
    /// An API was called in an unsupported way.
    Usage(String),
    /// A file does not follow its declared format.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, KprError>;

impl KprError {
    /// Exit category for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_category(&self) -> i32 {
        match self {
            KprError::Usage(_) | KprError::Parameter(_) => 1,
            KprError::Numeric(_) | KprError::Normalization(_) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for KprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KprError::Shape(m) => write!(f, "shape error: {m}"),
            KprError::Parameter(m) => write!(f, "parameter error: {m}"),
            KprError::Input(m) => write!(f, "input error: {m}"),
            KprError::Alignment(m) => write!(f, "alignment error: {m}"),
            KprError::Corpus(m) => write!(f, "corpus error: {m}"),
            KprError::Coverage(m) => write!(f, "coverage error: {m}"),
            KprError::Normalization(m) => write!(f, "normalization error: {m}"),
            KprError::Numeric(m) => write!(f, "numeric error: {m}"),
            KprError::Batch(m) => write!(f, "batch error: {m}"),
            KprError::Usage(m) => write!(f, "usage error: {m}"),
            KprError::Format(m) => write!(f, "format error: {m}"),
            KprError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for KprError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            KprError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for KprError {
    fn from(e: std::io::Error) -> Self {
        KprError::Io(e)
    }
}
