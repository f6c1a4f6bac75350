use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("sequence shorter than window (length {len}, window {window})")]
    SequenceShorterThanWindow { len: usize, window: usize },

    #[error("empty pooling input")]
    EmptyPooling,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("optimizer step called without populated gradients")]
    MissingGradients,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("JSON parse error at byte {offset}: {message}")]
    JsonParse { offset: usize, message: String },

    #[error("relation {relation}, instance {index}: {message}")]
    Instance {
        relation: String,
        index: usize,
        message: String,
    },

    #[error("vector file line {line}: {message}")]
    VectorFile { line: usize, message: String },

    #[error("episode sampling: {0}")]
    Sampling(String),

    #[error("relation sets overlap between splits: {0:?}")]
    SplitOverlap(Vec<String>),

    #[error("non-finite loss at episode {episode} (seed {seed}): softmax={softmax}, triplet={triplet}")]
    NonFiniteLoss {
        episode: u64,
        seed: u64,
        softmax: f64,
        triplet: f64,
    },

    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("unsupported version {0} in checkpoint header")]
    UnsupportedVersion(u32),

    #[error("config error: {0}")]
    Config(String),

    #[error("CSV error on line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

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
