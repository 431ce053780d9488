use std::path::PathBuf;

use thiserror::Error;

/// Failure modes shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training failed at step {step}: {detail}")]
    Optimizer { step: usize, detail: String },

    #[error("training aborted at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("attack failed at step {step}: {detail}")]
    Attack { step: usize, detail: String },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("csv: {0}")]
    CsvFormat(String),
}

impl Error {
    /// True for errors caused by bad user input (configs, flags, grids).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// IDX parsing failures. Offsets are byte positions in the offending file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic 0x{found:08x} at byte offset {offset}, expected 0x{expected:08x}")]
    BadMagic {
        offset: usize,
        expected: u32,
        found: u32,
    },

    #[error("truncated payload at byte offset {offset}: need {needed} bytes, file has {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("count mismatch at byte offset {offset}: {images} images but {labels} labels")]
    CountMismatch {
        offset: usize,
        images: usize,
        labels: usize,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
