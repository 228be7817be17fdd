//! Click-confidence learning via self-distillation (CLSD) for CTR models.
//!
//! A small training laboratory: a synthetic click corpus with ground-truth
//! confidence, LR/FM/DeepFM backbones with analytic gradients, the CLSD loss
//! family and its baselines, an Adam trainer, metrics and a grid runner.

pub mod corpus;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod runner;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
