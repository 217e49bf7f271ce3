use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension mismatch in {op}: left is {lhs:?}, right is {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Invalid user-supplied input.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad checkpoint header: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("{path}: checkpoint truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("{path}: checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: malformed record: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training produced a non-finite loss; the last good state was written to `dump`.
    #[error("numeric abort at step {step}: {reason}{}", dump_note(dump))]
    NumericAbort {
        step: usize,
        reason: String,
        dump: Option<PathBuf>,
    },
}

fn dump_note(dump: &Option<PathBuf>) -> String {
    match dump {
        Some(p) => format!(" (last good state written to {})", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
