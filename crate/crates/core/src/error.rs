use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter #{0} has no gradient")]
    MissingGrad(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {msg} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("class {class} has {have} sample(s), at least {need} required")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("class id {class} out of range for {count} classes")]
    InvalidClass { class: usize, count: usize },

    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("pooled feature variance is zero; cannot normalize")]
    ZeroVariance,

    #[error("anchor and negative share class {0}")]
    SameClassTriplet(usize),

    #[error("non-finite loss in batch for class pair ({k}, {l})")]
    NonFiniteLoss { k: usize, l: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("class {0} has a single member; R-based metrics are undefined")]
    SingletonClass(usize),

    #[error("{0}")]
    Invalid(String),
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
