//! Crate-wide error type.
//!
//! Variants are grouped by origin: config validation, file format, shape and
//! payload consistency, metric preconditions, and numeric failures. The CLI
//! maps config/validation errors to exit code 2 and numeric failures to 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A config field violated its documented bound.
    #[error("invalid config: {0}")]
    Config(String),

    /// Blob file does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    /// Blob format version not supported by this build.
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// A recorded offset/length reaches past the end of the blob.
    #[error("blob out of bounds for sequence `{sequence}` ({what}: offset {offset}, len {len}, blob size {blob_len})")]
    BlobOutOfBounds {
        sequence: String,
        what: String,
        offset: u64,
        len: u64,
        blob_len: u64,
    },

    /// Offsets in the manifest index must be strictly increasing.
    #[error("manifest offsets not strictly increasing at sequence `{sequence}`")]
    OffsetsNotIncreasing { sequence: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Two aligned buffers disagree in length, or a matrix has the wrong shape.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// An operation that averages over unmasked tokens received none.
    #[error("empty mask: no unmasked tokens in {0}")]
    EmptyMask(String),

    /// Requested layer is not present in the dataset.
    #[error("layer {layer} not stored in dataset (available: {available})")]
    MissingLayer { layer: usize, available: String },

    /// An optional payload required by the current config is absent.
    #[error("missing payload `{payload}` required by {needed_by}")]
    MissingPayload {
        payload: &'static str,
        needed_by: String,
    },

    /// Metric undefined on the given inputs (for example single-class labels).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Covariance matrix not positive definite even after jitter escalation.
    #[error("kernel matrix not positive definite (jitter up to {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },

    /// Training produced a non-finite loss; the step index is 0-based.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    /// Search/profile operations need at least one entry.
    #[error("empty profile: {0}")]
    EmptyProfile(String),
}

impl Error {
    /// Exit code the CLI uses for this error: 3 for numeric failures, 2
    /// otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
