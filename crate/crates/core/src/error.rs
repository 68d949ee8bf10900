use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("code length mismatch: {0} bits vs {1} bits")]
    LengthMismatch(usize, usize),

    #[error("entry {value} at position {index} is not -1 or +1")]
    InvalidSign { index: usize, value: f64 },

    #[error("bit range {start}..{end} exceeds code length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("code bank is empty")]
    EmptyBank,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no anchor in the batch has both a positive and a negative")]
    NoValidAnchor,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("exactness violation: {0}")]
    Exactness(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Attaches the offending path to an error raised while reading or writing it.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
