use std::path::PathBuf;

use crate::streamsync::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong between raw frames and a score.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing modality stream: {0}")]
    MissingModality(Modality),

    #[error("{modality} timestamps not strictly increasing at frame {index} ({previous} -> {current})")]
    NonMonotoneTimestamps {
        modality: Modality,
        index: usize,
        previous: f64,
        current: f64,
    },

    #[error("{modality}: shape mismatch (expected {expected:?}, got {got:?})")]
    ShapeMismatch {
        modality: Modality,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("degenerate normalization range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("model has no decision threshold")]
    MissingThreshold,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("group {group}: {source}")]
    Group {
        group: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DegenerateRange { .. } => 2,
            Error::TrainingDiverged { .. } => 4,
            Error::Group { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
