//! Probabilistic flow-field maps of human motion.
//!
//! The crate learns per-cell semi-wrapped Gaussian mixtures over (heading,
//! speed) from trajectory data, samples those mixtures to roll out
//! long-horizon stochastic predictions, and scores predictions against ground
//! truth with an ADE/FDE harness. Everything downstream of a seed is
//! deterministic, including under varying worker counts.

pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod map_builder;
pub mod motion_model;
pub mod predictor;
pub(crate) mod rng;

pub use error::{Error, Result};
pub use rng::derive_seed;
