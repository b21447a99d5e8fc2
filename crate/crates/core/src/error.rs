use thiserror::Error;

/// Errors surfaced by every stage of the erasure pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("insufficient points for k-means: {points} points, k = {k}")]
    InsufficientPoints { points: usize, k: usize },

    #[error("non-finite gradient at iteration {iteration} (cosine so far {cosine})")]
    NonFiniteGradient { iteration: usize, cosine: f64 },

    #[error("step underflow: reverse step requested at t = 0")]
    StepUnderflow,

    #[error("duplicate bank entry for concept {concept:?}, mode {mode}")]
    DuplicateEntry { concept: String, mode: usize },

    #[error("empty prototype bank")]
    EmptyBank,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("invariant violation in {field}: {detail}")]
    InvariantViolation { field: String, detail: String },

    #[error("detector calibration failed: tpr {tpr:.3}, fpr {fpr:.3}")]
    CalibrationFailure { tpr: f64, fpr: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
