use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}: no elements to reduce over")]
    Empty(&'static str),

    #[error("invalid context pyramid notation `{notation}`: {reason}")]
    PyramidNotation { notation: String, reason: String },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss in phase {phase} at iteration {iteration}")]
    NonFiniteLoss {
        phase: u8,
        iteration: usize,
        trace: Vec<f32>,
    },

    #[error("dataset holds {available} samples but a batch needs {required}")]
    DatasetExhausted { available: usize, required: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
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
}
