use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for extent {extent} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("batchnorm needs at least two elements per channel in train mode, got {0}")]
    DegenerateVariance(usize),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: first non-finite parameter is `{param}`")]
    Divergence { epoch: usize, param: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
