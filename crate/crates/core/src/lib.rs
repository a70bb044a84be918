//! Dimensional speech emotion estimation toolkit.
//!
//! Estimates activation, valence and dominance from frame-level feature
//! sequences with a time-convolutional GRU network trained on a concordance
//! correlation objective. Also provides multi-modal fusion, residual-weighted
//! embedding distillation, an acoustic front-end with noise/reverberation
//! corruption, transcript error metrics, and a synthetic corpus generator for
//! end-to-end checks.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod models;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
pub use metrics::{EmotionTriple, LossWeights};

/// Toolkit version recorded in run logs and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
