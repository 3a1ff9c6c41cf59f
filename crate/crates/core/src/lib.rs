//! Span grounding in untrimmed video by iterative denoising of noisy span proposals.

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod span_math;

pub use error::{Error, Result};
