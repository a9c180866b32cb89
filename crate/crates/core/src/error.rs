use std::path::PathBuf;

use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports.
///
/// The variants map one-to-one onto the stable error codes exposed over the
/// C ABI, so reordering them is a breaking change for bindings.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("class {0} appears more than once in the taxonomy")]
    DuplicateClass(ClassId),
    #[error("step {0} has no classes")]
    EmptyStep(usize),
    #[error("step {step} out of range (taxonomy has {steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("invalid class id {0}: background id 0 is reserved")]
    ReservedClass(ClassId),

    #[error("feature vector at ({0}, {1}) has zero norm")]
    ZeroVector(usize, usize),
    #[error("empty class set")]
    EmptyClassSet,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("percentage {0} outside (0, 100]")]
    BadPercentage(f64),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("foreground plane has no set pixels")]
    EmptyForeground,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backend failure ({endpoint}): {message}")]
    BackendFailure { endpoint: String, message: String },

    #[error("no class in the batch has foreground pixels")]
    NoForeground,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("class {0} is not an old class")]
    NotOldClass(ClassId),
    #[error("memory bank is empty")]
    EmptyBank,

    #[error("loss component is not finite: {0}")]
    NonFinite(String),
    #[error("missing pseudo labels for image {0}")]
    MissingPseudoLabels(String),

    #[error("label id {0} out of range")]
    IdOutOfRange(u16),

    #[error("missing prerequisite: {}", .0.display())]
    MissingPrerequisite(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Stable numeric code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::DuplicateClass(_) => 10,
            Error::EmptyStep(_) => 11,
            Error::StepOutOfRange { .. } => 12,
            Error::ReservedClass(_) => 13,
            Error::ZeroVector(..) => 20,
            Error::EmptyClassSet => 21,
            Error::DimMismatch { .. } => 22,
            Error::BadPercentage(_) => 23,
            Error::UnknownClass(_) => 24,
            Error::EmptyForeground => 25,
            Error::ShapeMismatch(_) => 26,
            Error::BackendFailure { .. } => 27,
            Error::NoForeground => 30,
            Error::BadTemperature(_) => 31,
            Error::NotOldClass(_) => 40,
            Error::EmptyBank => 41,
            Error::NonFinite(_) => 50,
            Error::MissingPseudoLabels(_) => 51,
            Error::IdOutOfRange(_) => 60,
            Error::MissingPrerequisite(_) => 70,
            Error::Config(_) => 71,
            Error::Format(_) => 80,
            Error::Io(_) => 81,
        }
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingPrerequisite(_) => 3,
            Error::Config(_)
            | Error::DuplicateClass(_)
            | Error::EmptyStep(_)
            | Error::StepOutOfRange { .. }
            | Error::ReservedClass(_)
            | Error::BadPercentage(_)
            | Error::BadTemperature(_) => 1,
            _ => 2,
        }
    }
}
