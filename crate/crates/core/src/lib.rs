//! Discrete diffusion on one-hot encoded sequences from a hierarchical
//! grammar, with exact and memorizing denoisers and the metrics used to
//! compare them.

pub mod denoisers;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod grammar;
pub mod metrics;
pub mod rng;

pub use error::{Error, Result};
