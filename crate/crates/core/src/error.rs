//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A container violated one of its invariants; names the offending field.
    Validation(String),
    /// Scenario/segments (or checkpoint/config) inputs that do not belong together.
    Consistency(String),
    /// Bad configuration value (ranges, dimensions, vocabulary sizes).
    Config(String),
    /// Empty or unusable map.
    Map(String),
    /// Synthetic placement could not fit the requested agents.
    Placement(String),
    /// No map segment passes the heading filter for an anchor query.
    NoAnchor,
    /// Sampling from a degenerate (all-zero) distribution.
    Sampling(String),
    /// Metric preconditions violated (empty sample sets, mismatched dims).
    Metric(String),
    /// Numerical failure during training (NaN/Inf loss).
    Numeric(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Validation(s) => write!(f, "validation error: {s}"),
            CoreError::Consistency(s) => write!(f, "consistency error: {s}"),
            CoreError::Config(s) => write!(f, "configuration error: {s}"),
            CoreError::Map(s) => write!(f, "map error: {s}"),
            CoreError::Placement(s) => write!(f, "placement error: {s}"),
            CoreError::NoAnchor => write!(f, "no map segment passes the heading filter"),
            CoreError::Sampling(s) => write!(f, "sampling error: {s}"),
            CoreError::Metric(s) => write!(f, "metric error: {s}"),
            CoreError::Numeric(s) => write!(f, "numeric error: {s}"),
        }
    }
}
