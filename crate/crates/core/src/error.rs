use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("line {line}: coefficient {value} of material '{name}' outside (0, 1)")]
    CoefficientOutOfRange { line: usize, name: String, value: f64 },

    #[error("line {line}: duplicate material name '{name}'")]
    DuplicateName { line: usize, name: String },

    #[error("line {line}: duplicate material id {id}")]
    DuplicateId { line: usize, id: u32 },

    #[error("empty material database")]
    EmptyDatabase,

    #[error("value {value} outside domain [{lo}, {hi}]")]
    DomainError { value: f64, lo: f64, hi: f64 },

    #[error("need 2 <= k <= n, got k = {k}, n = {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("non-finite input value")]
    NonFiniteInput,

    #[error("clusters {0} and {1} have coincident centroids")]
    DegenerateClusters(usize, usize),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("unknown material id {0}")]
    UnknownMaterial(u32),

    #[error("filterbank cannot be built: {0}")]
    UnstableFilter(String),

    #[error("infeasible room geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("split '{0}' is empty")]
    EmptySplit(String),

    #[error("sample rate mismatch: model expects {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("input of length {len} too short, need at least {need}")]
    InputTooShort { len: usize, need: usize },

    #[error("category {0}: training split holds only one class")]
    SingleClassSplit(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("need at least 3 rooms to partition, got {0}")]
    TooFewRooms(usize),

    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage '{stage}' failed: {source}")]
    StageFailure {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn stage(stage: &str, source: Error) -> Self {
        Error::StageFailure { stage: stage.to_string(), source: Box::new(source) }
    }
}
