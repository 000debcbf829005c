use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
///
/// Variants fall into two groups: input/validation problems (bad files,
/// violated dataset invariants, malformed configuration) and runtime failures
/// (I/O, degenerate statistics). [`Error::is_validation`] tells them apart so
/// front ends can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dimensionality mismatch: {context}: expected {expected}, found {found}")]
    DimensionalityMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),

    #[error("non-finite vector element in image {image_id:?} at position {position}")]
    NonFinite { image_id: String, position: usize },

    #[error("zero norm vector for image {0:?}")]
    ZeroNorm(String),

    #[error("unknown split token {0:?} (expected train, valid or test)")]
    UnknownSplit(String),

    #[error("lesion leakage: lesion {lesion_id:?} appears in both {first} and {second} splits")]
    LesionLeakage {
        lesion_id: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("image {0:?} has no pathology diagnosis but is not in the train split")]
    UnverifiedOutsideTrain(String),

    #[error("label {label:?} of image {image_id:?} is not in the label set")]
    UnknownLabel { image_id: String, label: String },

    #[error("empty pool: dataset has no train split records")]
    EmptyPool,

    #[error("missing prediction for test image {0:?}")]
    MissingPrediction(String),

    #[error("softmax row for {image_id:?} is not normalized (sum {sum})")]
    NotNormalized { image_id: String, sum: f64 },

    #[error("softmax row for {image_id:?} has entry {value} outside [0, 1]")]
    ProbabilityOutOfRange { image_id: String, value: f64 },

    #[error("k must be at least 1")]
    ZeroK,

    #[error("k = {k} exceeds pool size {pool}")]
    KExceedsPool { k: usize, pool: usize },

    #[error("query {query}: {source}")]
    Query {
        query: String,
        #[source]
        source: Box<Error>,
    },

    #[error("neighbor {0:?} has no known label")]
    UnresolvableNeighbor(String),

    #[error("unknown image id {0:?}")]
    UnknownImage(String),

    #[error("malignant set is empty or not a subset of the label set: {0}")]
    InvalidMalignantSet(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least one positive and one negative case")]
    SingleClassTruth,

    #[error("need at least {needed} positives and negatives for {what}")]
    TooFewCases { what: &'static str, needed: usize },

    #[error("no positive cases")]
    NoPositives,

    #[error("empty input")]
    EmptyInput,

    #[error("DeLong variance is zero but AUCs differ ({auc_a} vs {auc_b})")]
    DegenerateVariance { auc_a: f64, auc_b: f64 },

    #[error("metric is undefined on the full sample")]
    UndefinedMetric,

    #[error("empty stratum in bootstrap resampling")]
    EmptyStratum,

    #[error("bootstrap replicate {replicate} stayed undefined after {attempts} attempts")]
    BootstrapUndefined { replicate: usize, attempts: usize },

    #[error("degenerate: zero variance")]
    ZeroVariance,

    #[error("all differences are zero")]
    AllZeroDifferences,

    #[error("p-value {0} outside [0, 1]")]
    PValueOutOfRange(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("oracle instance too large: {what} size {size} exceeds cap {cap}")]
    OracleTooLarge {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("self-audit failed: {0}")]
    Audit(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid input data or configuration, as
    /// opposed to failures while running an otherwise valid job.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::DegenerateVariance { .. }
            | Error::BootstrapUndefined { .. }
            | Error::Audit(_) => false,
            Error::Query { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
