use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear system has no usable pivot.
    #[error("singular system: {0}")]
    Singular(String),

    /// A NaN or infinity appeared during iteration.
    #[error("numerical failure at iteration {iter}: {what}")]
    Numerical { iter: usize, what: String },

    /// A caller-supplied value is outside its documented range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The training loss became non-finite.
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    /// Certification of one point failed; no partial counts are reported.
    #[error("certification failed for point {point}: {source}")]
    CertificationFailed { point: u64, source: Box<Error> },

    /// Two reports cannot be compared row by row.
    #[error("misaligned reports: {0}")]
    Alignment(String),

    /// A file does not match its documented schema.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
