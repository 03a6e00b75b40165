use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("tensor length error: header declares {expected} elements, payload holds {actual}")]
    Length { expected: usize, actual: usize },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("manifest validation failed: {0}")]
    Validation(String),

    #[error("index {index} out of bounds for {len} rows")]
    Bounds { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid batch composition: caption {caption} appears more than once")]
    DuplicateCaption { caption: usize },

    #[error("degenerate relevance: {context} has no positive relevance entry")]
    DegenerateRelevance { context: String },

    #[error("degenerate embedding: row {row} has zero or non-finite norm")]
    DegenerateEmbedding { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot sample a batch of {requested} from {available} images")]
    Sampling { requested: usize, available: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {value}")]
    Divergence {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("split {0} is empty")]
    EmptySplit(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
