use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // graph and evidence
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("invalid variable spec `{name}`: {reason}")]
    InvalidVariable { name: String, reason: String },
    #[error("value {value} for `{name}` is outside bounds [{lower}, {upper}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("incomplete evidence: missing {}", .0.join(", "))]
    IncompleteEvidence(Vec<String>),
    #[error("missing exogenous noise for `{0}`")]
    MissingNoise(String),
    #[error("no mechanism for non-root variable `{0}`")]
    MissingMechanism(String),
    #[error("no prior declared for root variable `{0}`")]
    MissingPrior(String),

    // mechanisms
    #[error("arity mismatch: expected {expected} parents, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("non-positive mechanism scale {0}")]
    NonPositiveScale(f64),
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("training diverged for `{target}` at epoch {epoch} (learning rate {learning_rate})")]
    TrainingDiverged {
        target: String,
        epoch: usize,
        learning_rate: f64,
    },
    #[error("invalid spline parameters: {0}")]
    InvalidSpline(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("mechanism sets disagree on variables: {0}")]
    VariableMismatch(String),

    // generator, inversion, editing
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("geometry overflows the grid along axis {axis} ({extent_mm:.1} mm > {half_fov_mm:.1} mm)")]
    GridTooSmall {
        axis: char,
        extent_mm: f64,
        half_fov_mm: f64,
    },
    #[error("conjugate gradient stalled: residual did not decrease over {0} iterations")]
    CgStalled(usize),
    #[error("rank-deficient design ({samples} samples, {dim} dims): add more samples")]
    RankDeficient { samples: usize, dim: usize },
    #[error("collinear edit directions `{0}` and `{1}`")]
    Collinear(String, String),
    #[error("regression direction for `{0}` is zero")]
    ZeroDirection(String),
    #[error("invalid edit request: {0}")]
    InvalidEdit(String),
    #[error("missing demographic evidence: {}", .0.join(", "))]
    MissingDemographics(Vec<String>),

    // metrics
    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    // io
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("bad NIfTI header: {0}")]
    BadHeader(String),
    #[error("manifest header mismatch: expected `{expected}`, found `{found}`")]
    ManifestHeader { expected: String, found: String },
    #[error("manifest line {line}: {reason}")]
    ManifestRow { line: u64, reason: String },
    #[error("unsupported format version {0}")]
    FormatVersion(u32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }
}
