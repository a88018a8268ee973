use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TataError>;

#[derive(Debug, Error)]
pub enum TataError {
    #[error("vector norm is below 1e-12 and cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension {0} is too small for an observation reshape (need >= 4)")]
    DimensionTooSmall(usize),
    #[error("BDC matrix size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid cluster count {0}")]
    InvalidN(usize),
    #[error("centroid list is empty")]
    EmptyCentroids,
    #[error("member list is empty")]
    EmptyMembers,

    #[error("bank has {got} entries, need at least {needed}")]
    BankTooSmall { needed: usize, got: usize },
    #[error("invalid count {0}")]
    InvalidCount(usize),
    #[error("class name is empty")]
    EmptyClassName,

    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("distribution length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("alpha must be >= 0, got {0}")]
    NegativeAlpha(f64),
    #[error("adaptation state is not initialized")]
    UninitializedState,
    #[error("need at least {needed} samples to bootstrap, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: &'static str, reason: String },

    #[error("encoder request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("encoder error: {0}")]
    Encoder(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TataError {
    /// Process exit code: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            TataError::Io(_)
            | TataError::Timeout(_)
            | TataError::Protocol(_)
            | TataError::Encoder(_) => 2,
            _ => 1,
        }
    }
}
