use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MuseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MuseError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate attention row {row} (restricted mass {mass:e})")]
    DegenerateRow { row: usize, mass: f64 },

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("non-finite value at step {step} in {name}")]
    NonFinite { step: u64, name: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MuseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MuseError::Io { path: path.into(), source }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MuseError::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MuseError::Io { .. }
            | MuseError::Parse { .. }
            | MuseError::Version { .. }
            | MuseError::Truncated { .. } => 3,
            MuseError::NumericDomain { .. } | MuseError::NonFinite { .. } | MuseError::DegenerateRow { .. } => 4,
            _ => 2,
        }
    }
}
