//! Scenario file formats, checkpoints, config, and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod plot;
pub mod tokens;
