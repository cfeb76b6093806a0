//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation input: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("operation requires a denormalized clip")]
    NormalizedInput,
    #[error("normalization stats mismatch: {0}")]
    StatsMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diffusion step out of range: t={t}, T={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty audio")]
    EmptyAudio,
    #[error("malformed token timing: {0}")]
    BadTiming(String),
    #[error("audio/text feature length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("condition bundle has no object")]
    MissingObject,
    #[error("condition bundle is missing a required condition: {0}")]
    MissingCondition(String),
    #[error("no forward trace recorded; run the forward pass in gradient mode")]
    NoTrace,
    #[error("bad supervision window: K={k}, N={n}")]
    BadWindow { k: usize, n: usize },
    #[error("clip too short: {n} frames, window {w}")]
    ClipTooShort { n: usize, w: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance is not positive semi-definite (min eigenvalue {0})")]
    NotPSD(f64),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("empty clip")]
    EmptyClip,
    #[error("goal unreachable from start: {0}")]
    UnreachableGoal(String),
    #[error("bad beat times: {0}")]
    BadBeats(String),
    #[error("missing prerequisite checkpoint: {0}")]
    MissingPrereq(String),
    #[error("dataset does not match training stage: {0}")]
    DataMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI maps this error to: 1 for input/validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::NoTrace => 2,
            _ => 1,
        }
    }
}
