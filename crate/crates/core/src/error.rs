use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants fall into three families that the CLI maps to exit codes:
/// usage errors (bad arguments), data errors (inputs that violate a format
/// or invariant) and I/O errors.
#[derive(Debug, Error)]
pub enum IfaError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch in sample {sample_id}: {detail}")]
    ShapeMismatch { sample_id: u64, detail: String },

    #[error("duplicate sample id {0}")]
    DuplicateSample(u64),

    #[error("corrupt record for sample {sample_id}: {detail}")]
    CorruptRecord { sample_id: u64, detail: String },

    #[error("non-finite values in {tensor} of sample {sample_id}")]
    NonFinite { sample_id: u64, tensor: String },

    #[error("missing gradients for class {class_id} in samples {sample_ids:?}")]
    MissingGradients { class_id: i32, sample_ids: Vec<u64> },

    #[error("no samples matched: {0}")]
    Empty(String),

    #[error("degenerate percentiles: P90 ({p90}) must be strictly greater than P10 ({p10})")]
    DegeneratePercentiles { p10: f64, p90: f64 },

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse classification of an [`IfaError`], used for exit codes and the C ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Io,
}

impl IfaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IfaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            IfaError::Io { .. } => ErrorKind::Io,
            IfaError::InvalidArgument(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = IfaError> = std::result::Result<T, E>;
