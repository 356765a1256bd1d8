use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: batch too small (need at least {needed}, got {got})")]
    BatchTooSmall { op: &'static str, needed: usize, got: usize },
    #[error("{what} index {index} out of range (len {len})")]
    Range { what: &'static str, index: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("batch composition: {sources} source samples vs {targets} target samples")]
    BatchComposition { sources: usize, targets: usize },
    #[error("cannot sample {requested} identities from {available}")]
    Sampling { requested: usize, available: usize },
    #[error("distance matrix invalid at ({row}, {col}): {reason}")]
    InvalidDistances { row: usize, col: usize, reason: &'static str },
    #[error("clustering produced no clusters ({noise} noise points); lower eps or min_pts for this data")]
    NoClusters { noise: usize },
    #[error("non-finite loss at epoch {epoch}, iteration {iter}")]
    NonFinite { epoch: usize, iter: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Rank { .. } => "dimension",
            Error::BatchTooSmall { .. } | Error::BatchComposition { .. } | Error::Sampling { .. } => "batch",
            Error::Range { .. } | Error::Label { .. } => "range",
            Error::InvalidDistances { .. } | Error::NoClusters { .. } => "clustering",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidArgument(_) => "invalid-argument",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
