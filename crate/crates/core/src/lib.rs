//! Core algorithms for autoregressive traffic scenario generation.
//!
//! The crate is `no_std` (with `alloc`) so the whole pipeline — scenario
//! containers, map segmentation, motion tokenization, the transformer and
//! its training loop, the closed-loop rollout engine, and the evaluation
//! metrics — can run without an operating system. All IO, file formats and
//! the CLI live in the companion `scenestreamer` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod kinematics;
pub mod map_codec;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rollout;
pub mod scenario;
pub mod sequence;
pub mod state_codec;
pub mod train;

pub use error::CoreError;
