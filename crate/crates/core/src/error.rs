use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("query row {row} has no admissible key")]
    FullyMaskedRow { row: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated input while reading {0}")]
    Truncated(&'static str),

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bad config: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {detail}")]
    NumericAbort {
        step: usize,
        batch_seed: u64,
        detail: String,
    },

    #[error("codec is untrained")]
    UntrainedCodec,

    #[error("session is closed")]
    SessionClosed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::NumericAbort { .. } | Error::NonFinite(_) => 3,
            Error::Mismatch(_) => 4,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::BadVersion(_)
            | Error::Truncated(_)
            | Error::DuplicateName(_)
            | Error::Format(_) => 5,
            _ => 1,
        }
    }
}
