use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query {0:?} has no prediction")]
    MissingPrediction(String),

    #[error("prediction references unknown query {0:?}")]
    UnknownQuery(String),

    #[error("records not aligned: {0}")]
    Alignment(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("confidence tokens already present in vocabulary")]
    TokensAlreadyPresent,

    #[error("model has no confidence tokens")]
    NoConfidenceTokens,

    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocab(String),

    #[error("example has no weighted positions")]
    AllZeroWeights,

    #[error("sequence of length {len} exceeds model context of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("gradient check failed at step {step}: max relative error {error:e}")]
    GradCheck { step: usize, error: f64 },

    #[error("zero-sum probabilities: {0}")]
    ZeroSum(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("value {0} outside [0, 1]")]
    Range(f64),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("unsupported record {id:?}: {reason}")]
    UnsupportedRecord { id: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("upstream {backend} failed: {message}")]
    Upstream { backend: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("bind error on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
