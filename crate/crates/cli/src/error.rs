//! Exit-code taxonomy and the machine-readable error record.

use std::fmt;

use serde_json::json;
use tap_core::datasets::DatasetError;
use tap_core::encoder::EncoderError;
use tap_core::generation::GenerationError;
use tap_core::toa::ToaError;
use tap_core::training::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Failed,
    Args,
    Io,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Failed => 1,
            Kind::Args => 2,
            Kind::Io => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, code: &str, message: impl Into<String>) -> Self {
        Self { kind, code: code.to_string(), message: message.into() }
    }

    pub fn args(message: impl Into<String>) -> Self {
        Self::new(Kind::Args, "bad-args", message)
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::new(Kind::Io, "io", format!("{}: {e}", path.display()))
    }

    pub fn record(&self) -> String {
        json!({ "error": self.code, "exit_code": self.kind.exit_code(), "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        let (kind, code) = match &e {
            EncoderError::Io(_) | EncoderError::Image(_) | EncoderError::Checkpoint(_) => (Kind::Io, "io"),
            EncoderError::UnknownBackend(_) | EncoderError::Config(_) => (Kind::Args, "bad-args"),
            EncoderError::Toa(_) => (Kind::Args, "invalid-tree"),
            _ => (Kind::Failed, "encoder"),
        };
        Self::new(kind, code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::new(Kind::Numeric, "non-finite", e.to_string()),
            TrainError::Config(_) => Self::new(Kind::Args, "bad-config", e.to_string()),
            TrainError::Encoder(inner) => inner.into(),
            TrainError::Toa(inner) => inner.into(),
            other => Self::new(Kind::Failed, "training", other.to_string()),
        }
    }
}

impl From<ToaError> for CliError {
    fn from(e: ToaError) -> Self {
        Self::new(Kind::Args, "invalid-tree", e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Image { .. } | DatasetError::Parse { .. } => {
                Self::new(Kind::Io, "io", e.to_string())
            }
            DatasetError::Train(inner) => inner.into(),
            DatasetError::Encoder(inner) => inner.into(),
            DatasetError::Toa(inner) => inner.into(),
            DatasetError::Inference(_) => Self::new(Kind::Failed, "inference", e.to_string()),
            _ => Self::new(Kind::Args, "bad-config", e.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        let kind = match e.code() {
            "backend" => Kind::Io,
            "bad-job" => Kind::Args,
            _ => Kind::Failed,
        };
        Self::new(kind, e.code(), e.to_string())
    }
}
