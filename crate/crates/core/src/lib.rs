pub mod commands;
pub mod config;
pub mod data;
pub mod diff;
pub mod evaluator;
pub mod error;
pub mod hypergraph;
pub mod loss;
pub mod model;
pub mod sparse;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
