use std::fmt;

use gradecast::Error;
use gradecast_service::api::ApiError;

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Training,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Training => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub class: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, class: &str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            class: class.to_string(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, "UsageError", message)
    }

    /// Wraps a library error raised while training.
    pub fn training(e: Error) -> Self {
        let kind = match e {
            Error::InvalidConfig(_) => Kind::Usage,
            Error::Io(_)
            | Error::Json(_)
            | Error::Parse { .. }
            | Error::InvalidGrade(_)
            | Error::DuplicateRecord { .. }
            | Error::InvalidPriorSet { .. }
            | Error::MissingFeatures(_)
            | Error::UnknownCourse(_) => Kind::Data,
            _ => Kind::Training,
        };
        CliError::new(kind, e.class(), e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.class, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) => Kind::Usage,
            Error::InsufficientHistory(_) | Error::NonFiniteGradient(_) => Kind::Training,
            _ => Kind::Data,
        };
        CliError::new(kind, e.class(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Kind::Data, "IoError", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(Kind::Data, "JsonError", e.to_string())
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        let kind = if e.status >= 500 { Kind::Training } else { Kind::Data };
        let class: String = e
            .error
            .split('_')
            .flat_map(|word| {
                let mut chars = word.chars();
                chars.next().map(|c| c.to_ascii_uppercase()).into_iter().chain(chars)
            })
            .collect();
        CliError::new(kind, &class, e.detail)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
