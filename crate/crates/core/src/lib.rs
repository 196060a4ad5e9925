pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
