//! Multi-label video classification under label noise: a compact tensor
//! library with reverse-mode differentiation, a small model zoo, ranking
//! and cross-entropy losses, GAP evaluation, cross-validated training,
//! ensemble soft-label distillation, and error analysis.

pub mod analysis;
pub mod dataio;
pub mod diffcore;
pub mod distill;
pub mod error;
pub mod framefeat;
pub mod lossmetrics;
pub mod models;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
