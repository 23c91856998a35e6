//! One error type for the whole toolkit, grouped into the three failure
//! classes the CLI maps to exit codes: configuration, data, numeric.

use std::path::PathBuf;

/// Failure class; the CLI turns this into a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid or inconsistent configuration (exit code 2).
    Config,
    /// Missing, malformed, or out-of-contract input data (exit code 3).
    Data,
    /// Numeric breakdown during computation (exit code 4).
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty input: {context}")]
    EmptyInput { context: String },
    #[error("index {index} out of range (limit {limit}): {context}")]
    IndexOutOfRange {
        index: usize,
        limit: usize,
        context: String,
    },
    #[error("unknown format in {path}: {detail}")]
    UnknownFormat { path: PathBuf, detail: String },

    #[error("singular design: lambda = 0 requires full column rank")]
    SingularDesign,
    #[error("too few samples: {n} rows for {need}")]
    TooFewSamples { n: usize, need: String },

    #[error("degenerate covariance: {detail}")]
    DegenerateCovariance { detail: String },
    #[error("length mismatch: {context}")]
    LengthMismatch { context: String },
    #[error("non-finite fitness at candidate {index}")]
    NonFiniteFitness { index: usize },
    #[error("non-finite gradient: {context}")]
    NonFiniteGradient { context: String },

    #[error("operation unsupported by this oracle: {what}")]
    Unsupported { what: String },
    #[error("no gradient available: {context}")]
    GradientUnavailable { context: String },

    #[error("zero variance in {context}")]
    ZeroVariance { context: String },
    #[error("too few items: need at least {need}, got {got}")]
    TooFewItems { need: usize, got: usize },
    #[error("image too small: {height}x{width}, need at least {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("zero-norm vector in {context}")]
    ZeroNorm { context: String },
    #[error("empty ROI mask: {name}")]
    EmptyMask { name: String },

    #[error("config error: {detail}")]
    Config { detail: String },
    #[error("missing upstream artifact: {detail}")]
    UpstreamMissing { detail: String },
}

impl Error {
    /// Failure class used for CLI exit codes and error routing.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Config { .. } => ErrorCategory::Config,
            MissingFile { .. }
            | BadMagic { .. }
            | ShapeMismatch { .. }
            | IoFailure { .. }
            | EmptyInput { .. }
            | IndexOutOfRange { .. }
            | UnknownFormat { .. }
            | LengthMismatch { .. }
            | TooFewSamples { .. }
            | TooFewItems { .. }
            | ImageTooSmall { .. }
            | EmptyMask { .. }
            | UpstreamMissing { .. } => ErrorCategory::Data,
            NonFinite { .. }
            | SingularDesign
            | DegenerateCovariance { .. }
            | NonFiniteFitness { .. }
            | NonFiniteGradient { .. }
            | Unsupported { .. }
            | GradientUnavailable { .. }
            | ZeroVariance { .. }
            | ZeroNorm { .. } => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
