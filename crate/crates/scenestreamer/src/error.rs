//! Process-level error classes mapped onto exit codes.

use std::fmt;

use scenestreamer_core::CoreError;

/// Exit codes: 0 success, 2 usage, 3 validation/format, 4 runtime/numeric.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Validation(_) => 3,
            AppError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage error: {m}"),
            AppError::Validation(m) => write!(f, "validation error: {m}"),
            AppError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Validation(_)
            | CoreError::Consistency(_)
            | CoreError::Config(_)
            | CoreError::Map(_)
            | CoreError::Placement(_)
            | CoreError::Metric(_) => AppError::Validation(e.to_string()),
            CoreError::NoAnchor | CoreError::Sampling(_) | CoreError::Numeric(_) => {
                AppError::Runtime(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(format!("io: {e}"))
    }
}

pub type AppResult<T> = Result<T, AppError>;
