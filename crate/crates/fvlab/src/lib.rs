//! Multi-view image fusion with hierarchical conditional VAEs.

pub mod aggregation;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
