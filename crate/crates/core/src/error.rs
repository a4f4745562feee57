use std::path::PathBuf;

/// Errors produced anywhere in the prediction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("duplicate annotation for pedestrian {pedestrian_id} at frame {frame_id}")]
    DuplicateAnnotation { frame_id: i64, pedestrian_id: i64 },

    #[error("homography is not invertible (determinant {0:e})")]
    SingularHomography(f64),

    #[error("point ({x}, {y}) maps to infinity under the homography")]
    DegeneratePoint { x: f64, y: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("trajectory has no heading: all points coincide")]
    DegenerateHeading,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter `{name}`: {msg}")]
    Parameter { name: &'static str, msg: String },

    #[error("cannot load weights for encoder backend `{backend}`: {msg}")]
    WeightsLoad { backend: String, msg: String },

    #[error("architecture configuration error: {0}")]
    Architecture(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("non-finite loss at step {step} (learning rate {learning_rate:e}, batch {batch:?})")]
    NonFiniteLoss {
        step: usize,
        learning_rate: f64,
        batch: Vec<String>,
    },

    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("symbol {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),

    #[error("cannot decode generated text ({reason}): {raw:?}")]
    DecodeFailure { reason: String, raw: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(name: &'static str, msg: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            msg: msg.into(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Checkpoint {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
