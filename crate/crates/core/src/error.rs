//! Error type shared by every module of the crate.

use std::path::PathBuf;

use crate::responsefmt::ParseError;

/// Errors raised by dataset handling, reward computation, policy updates
/// and the experiment drivers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed row at line {line}: field `{field}`: {detail}")]
    MalformedRow {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("score {value} for `{field}` is outside [1, 5]")]
    OutOfRangeScore { field: String, value: f64 },

    #[error("probability {0} is outside [0, 1]")]
    OutOfRangeProbability(f64),

    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("group has {0} samples; at least 2 are required")]
    GroupTooSmall(usize),

    #[error("batch has {0} groups; at least 2 are required")]
    BatchTooSmall(usize),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite log-probability: {0}")]
    NonFiniteLogProb(f64),

    #[error("negative variance {0}")]
    NegativeVariance(f64),

    #[error("image `{image_id}` has no ground truth for dimension `{dimension}`")]
    MissingGroundTruth { image_id: String, dimension: String },

    #[error("no prediction for image `{image_id}` dimension `{dimension}`")]
    MissingPrediction { image_id: String, dimension: String },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("policy keys do not match: {0}")]
    KeyMismatch(String),

    #[error("reward history is empty")]
    EmptyHistory,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("attribute list is empty")]
    EmptyAttributeList,

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
