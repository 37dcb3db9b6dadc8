use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::GraphError;
use crate::data::DataError;
use crate::quantizer::QuantError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid network: {0}")]
    Network(String),
    #[error("prune candidates are stale: {0}")]
    StaleCandidates(String),
    #[error("refusing to remove every channel feeding `{0}`")]
    WouldEmptyLayer(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("output changed by {deviation:e} after removing channels (limit {limit:e})")]
    Preservation { deviation: f64, limit: f64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 configuration, 2 data or checkpoint, 3
    /// divergence or a failed preservation check.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            Error::Diverged { .. } | Error::Preservation { .. } => 3,
            Error::Data(_) | Error::Checkpoint { .. } | Error::Io { .. } | Error::Json(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
