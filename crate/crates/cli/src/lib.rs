//! Experiment harness for generalized iterative magnitude pruning: TOML
//! configs, checkpoints, record CSVs, and SVG plots.

pub mod checkpoint;
pub mod config;
mod error;
pub mod pixels;
pub mod plot;
pub mod records;
pub mod run;

pub use error::{Error, Result};
