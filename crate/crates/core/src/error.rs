use std::path::PathBuf;

use crate::clustering::LeafId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_name} is {left:?}, {right_name} is {right:?}")]
    Shape {
        op: &'static str,
        left_name: &'static str,
        left: (usize, usize),
        right_name: &'static str,
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("coordinate on axis {axis} is {value}, outside [-1, 1]")]
    CoordinateRange { axis: String, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("truncated {what}: needed {needed} more bytes at offset {offset}")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
    },

    #[error("CRC32 checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("model and dataset fingerprints do not match: model {model}, dataset {dataset}")]
    FingerprintMismatch { model: String, dataset: String },

    #[error("non-finite loss {loss} ({context})")]
    NonFiniteLoss { loss: f64, context: String },

    #[error("training of leaf {leaf} diverged at epoch {epoch}; best loss {best_loss:e} retained")]
    Diverged {
        leaf: LeafId,
        epoch: usize,
        best_loss: f64,
        checkpoint: Box<crate::model::NetworkParams<f32>>,
    },

    #[error("pipeline failed: {}", .0.join("; "))]
    Pipeline(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
