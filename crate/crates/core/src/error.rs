use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: non-positive output extent (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    EmptyOutput {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("channel mismatch in {op}: expected {expected}, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label smoothing gap is infinite for epsilon = 0")]
    InfiniteGap,

    #[error("malformed data at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
