use thiserror::Error;

use crate::gateway::BackendRole;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can surface to a caller.
#[derive(Debug, Error)]
pub enum Error {
    #[error("composed query requires a reference image")]
    MissingReference,
    #[error("text-to-image query must not carry a reference image")]
    UnexpectedReference,
    #[error("query text is empty")]
    EmptyText,
    #[error("chat query requires a non-empty dialog after the first round")]
    EmptyDialog,
    #[error("session not found: {0}")]
    SessionNotFound(String),

    #[error("template error: {0}")]
    Template(String),
    #[error("atomic instruction list is empty")]
    EmptyDecomposition,

    #[error("backend for {role} unavailable: {message}")]
    BackendUnavailable { role: BackendRole, message: String },
    #[error("backend for {role} timed out after {millis} ms")]
    Timeout { role: BackendRole, millis: u64 },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("no backend configured for {0}")]
    NotConfigured(BackendRole),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("failed to parse {stage} output: {message}")]
    Parse { stage: &'static str, message: String },
    #[error("ambiguous answer: {0:?}")]
    AmbiguousAnswer(String),

    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("subset group missing or does not contain a ground-truth image")]
    MissingSubset,
    #[error("unknown image id: {0}")]
    UnknownImage(String),
    #[error("image load failed for {uri}: {message}")]
    ImageLoad { uri: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid benchmark case: {0}")]
    InvalidCase(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            stage,
            message: message.into(),
        }
    }

    /// Stable machine-readable code used in service error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingReference => "MissingReference",
            Error::UnexpectedReference => "UnexpectedReference",
            Error::EmptyText => "EmptyText",
            Error::EmptyDialog => "EmptyDialog",
            Error::SessionNotFound(_) => "SessionNotFound",
            Error::Template(_) => "TemplateError",
            Error::EmptyDecomposition => "EmptyDecomposition",
            Error::BackendUnavailable { .. } => "BackendUnavailable",
            Error::Timeout { .. } => "Timeout",
            Error::MalformedResponse(_) => "MalformedResponse",
            Error::NotConfigured(_) => "NotConfigured",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Parse { .. } => "ParseError",
            Error::AmbiguousAnswer(_) => "AmbiguousAnswer",
            Error::CorruptIndex(_) => "CorruptIndex",
            Error::MissingSubset => "MissingSubset",
            Error::UnknownImage(_) => "UnknownImage",
            Error::ImageLoad { .. } => "ImageLoad",
            Error::Config(_) => "ConfigError",
            Error::InvalidCase(_) => "InvalidCase",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    /// True for query validation failures (client errors).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingReference
                | Error::UnexpectedReference
                | Error::EmptyText
                | Error::EmptyDialog
                | Error::InvalidCase(_)
                | Error::Config(_)
        )
    }

    /// True when a model backend could not be reached or answered too slowly.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::BackendUnavailable { .. } | Error::Timeout { .. } | Error::NotConfigured(_)
        )
    }
}
