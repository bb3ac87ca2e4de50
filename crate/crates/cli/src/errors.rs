//! Process-level error taxonomy. Every failure a command can hit maps
//! onto one of three exit codes, so scripts can tell a bad invocation
//! from a broken artifact from a numeric blow-up.

use std::fmt;
use std::path::Path;

use cade_core::checkpoint::CheckpointError;
use cade_core::continual_trainer::TrainError;
use cade_core::datagen::DataError;
use cade_core::inference_eval::EvalError;

/// Exit code 1: the invocation or configuration is wrong.
pub const EXIT_USAGE: i32 = 1;
/// Exit code 2: an on-disk artifact is missing or malformed.
pub const EXIT_DATA: i32 = 2;
/// Exit code 3: training or evaluation failed numerically.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Data(_) => EXIT_DATA,
            AppError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for AppError {}

pub type AppResult<T> = Result<T, AppError>;

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => AppError::Usage(e.to_string()),
            DataError::Dataset(_) | DataError::Format { .. } | DataError::Io { .. } => {
                AppError::Data(e.to_string())
            }
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => AppError::Usage(e.to_string()),
            TrainError::Data(_) => AppError::Data(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Model(_) | TrainError::Eval(_) => {
                AppError::Numeric(e.to_string())
            }
        }
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Argument(_) => AppError::Usage(e.to_string()),
            EvalError::Parse(_) => AppError::Data(e.to_string()),
            _ => AppError::Numeric(e.to_string()),
        }
    }
}

impl From<CheckpointError> for AppError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) | CheckpointError::Format(_) => AppError::Data(e.to_string()),
            CheckpointError::Model(_) => AppError::Numeric(e.to_string()),
            CheckpointError::Train(t) => t.into(),
        }
    }
}

/// Io error tagged with the path it happened on.
pub fn io_at(path: &Path, e: std::io::Error) -> AppError {
    AppError::Data(format!("{}: {e}", path.display()))
}
