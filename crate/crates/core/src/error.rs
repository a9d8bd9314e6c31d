use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("sample `{id}`: {detail}")]
    Sample { id: String, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        kind: &'static str,
        path: impl Into<PathBuf>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            detail: detail.into(),
        }
    }
}
