use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("step {step} out of range [{min}, {max}]")]
    StepOutOfRange { step: usize, min: usize, max: usize },

    #[error("unknown condition {0:?}")]
    UnknownCondition(String),

    #[error("noise prediction is undefined at t = 0 (alpha_0 = 1)")]
    UndefinedAtStepZero,

    #[error("denoiser does not support attention capture")]
    CaptureUnsupported,

    #[error("denoiser does not support attention injection")]
    InjectionUnsupported,

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("numeric divergence at step {step}: {detail}")]
    NumericDivergence { step: usize, detail: String },

    #[error("missing field `{0}`")]
    MissingField(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("config validation failed for [{}]: {message}", fields.join(", "))]
    Validation {
        fields: Vec<&'static str>,
        message: String,
    },

    #[error("trajectory config hash {found} does not match current config {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("missing fixture ids: {}", .0.join(", "))]
    MissingFixtures(Vec<String>),

    #[error("unknown metric {name:?}; supported: {}", supported.join(", "))]
    UnknownMetric {
        name: String,
        supported: Vec<&'static str>,
    },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("http request failed: {0}")]
    Http(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// Wraps the error with a stage annotation, e.g. `"cycle forward 40->60"`.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 validation, 3 io, 4 numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::InvalidRange(_)
            | Error::Validation { .. }
            | Error::ConfigMismatch { .. }
            | Error::UnknownMetric { .. }
            | Error::MissingFixtures(_)
            | Error::MissingField(_)
            | Error::Empty(_)
            | Error::UnknownCondition(_)
            | Error::ScheduleMismatch(_)
            | Error::ShapeMismatch { .. }
            | Error::StepOutOfRange { .. }
            | Error::InvariantViolation(_)
            | Error::CaptureUnsupported
            | Error::InjectionUnsupported => 2,
            Error::FileNotFound(_) | Error::Io { .. } | Error::Format { .. } | Error::Http(_) => 3,
            Error::NumericDivergence { .. } => 4,
            Error::UndefinedAtStepZero | Error::CheckFailed(_) => 1,
        }
    }
}
