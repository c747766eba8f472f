//! Hierarchical reinforcement learning with deterministic option policies
//! whose options are discovered by advantage-weighted mutual-information
//! maximization, on top of a twin-delayed deterministic policy gradient
//! learner.

pub mod agent;
pub mod buffers;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod envsim;
pub mod error;
pub mod hpolicy;
pub mod ndmath;
pub mod optionnet;

pub use config::{load_config, ExperimentConfig, Mode};
pub use error::{Error, Result};
