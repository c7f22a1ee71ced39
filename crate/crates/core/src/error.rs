use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate anchor: width {width} and height {height} must both be positive")]
    DegenerateAnchor { width: f64, height: f64 },

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no classes available for phase {0}")]
    EmptyPhase(&'static str),

    #[error("class {class} has only {available} instances, {requested} requested")]
    InsufficientInstances {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("phase violation: expected detector in phase {expected}, found {found}")]
    PhaseViolation {
        expected: &'static str,
        found: &'static str,
    },

    #[error("no ground truth")]
    NoGroundTruth,

    #[error("xml parse error at byte {offset}: {message}")]
    Xml { offset: usize, message: String },

    #[error("object {index}: {message}")]
    InvalidObject { index: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("referential integrity: {0}")]
    Reference(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
