use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate rotation: quaternion norm {norm} is below {min}")]
    DegenerateRotation { norm: f64, min: f64 },

    #[error("invalid depth: t_z = {0} but the object must lie in front of the camera (t_z > 0)")]
    InvalidDepth(f64),

    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("insufficient temporal context: need at least {need} frames, got {got}")]
    InsufficientContext { need: usize, got: usize },

    #[error("sequence too short: sampling a clip of {clip_len} at stride up to {max_stride} needs at least {need} frames, sequence has {got}")]
    SequenceTooShort {
        clip_len: usize,
        max_stride: usize,
        need: usize,
        got: usize,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported schema version {found:?} (supported: {supported})")]
    SchemaVersion { found: String, supported: &'static str },

    #[error("missing feature for sequence {sequence} frame {frame} object {object}")]
    MissingFeature {
        sequence: String,
        frame: usize,
        object: usize,
    },

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: u64,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
