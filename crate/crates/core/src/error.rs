use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MglError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MglError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss at iteration {iter} (max |grad| = {max_grad:e})")]
    NonFinite { iter: usize, max_grad: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"MGLC\")")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Dimension {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {0} missing from checkpoint")]
    Missing(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl MglError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MglError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        MglError::Shape(msg.into())
    }
}
