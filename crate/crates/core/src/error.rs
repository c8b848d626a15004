use thiserror::Error;

/// Errors surfaced by every layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grade `{0}`")]
    InvalidGrade(String),

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: String },

    #[error("grade {0} is not on the letter-grade grid")]
    OffGrid(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate record for student `{student}`, course `{course}`, term {term}")]
    DuplicateRecord { student: String, course: String, term: u32 },

    #[error("invalid prior set for `{target}`: {reason}")]
    InvalidPriorSet { target: String, reason: String },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("cache does not belong to the current parameters")]
    CacheMismatch,

    #[error("non-finite gradient in block `{0}`")]
    NonFiniteGradient(String),

    #[error("missing content features: {0}")]
    MissingFeatures(String),

    #[error("encoding mismatch: {0}")]
    EncodingMismatch(String),

    #[error("family {0} does not support MC dropout")]
    UnsupportedFamily(String),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown course `{0}`")]
    UnknownCourse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn out_of_range(what: &'static str, value: impl ToString) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
        }
    }

    /// Short machine-readable class name, used for CLI diagnostics and API error codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidGrade(_) => "InvalidGrade",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::OffGrid(_) => "OffGrid",
            Error::Parse { .. } => "ParseError",
            Error::DuplicateRecord { .. } => "DuplicateRecord",
            Error::InvalidPriorSet { .. } => "InvalidPriorSet",
            Error::InsufficientHistory(_) => "InsufficientHistory",
            Error::Shape(_) => "ShapeError",
            Error::EmptySequence => "EmptySequence",
            Error::CacheMismatch => "CacheMismatch",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::MissingFeatures(_) => "MissingFeatures",
            Error::EncodingMismatch(_) => "EncodingMismatch",
            Error::UnsupportedFamily(_) => "UnsupportedFamily",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnknownCourse(_) => "UnknownCourse",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}
