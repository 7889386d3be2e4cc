use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("invalid split ratios ({0}, {1}, {2}): must be positive and sum to 1")]
    InvalidRatios(f64, f64, f64),

    #[error("no negative activity exists for context (u={u}, l={l}, t={t})")]
    NoNegative { u: u32, l: u32, t: u32 },

    #[error("index ({row}, {col}) out of range for {rows}x{cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op} requires non-negative entries, found {value}")]
    NegativeEntry { op: &'static str, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("instance too large: {0} combination columns exceeds the oracle limit")]
    TooLarge(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("vocabulary hash mismatch for {0}")]
    VocabMismatch(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 usage, 2 data, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 1,
            Error::Verification(_) => 3,
            _ => 2,
        }
    }
}
