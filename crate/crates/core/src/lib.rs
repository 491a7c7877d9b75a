//! Simulation and planning toolkit for elastic, serverless RL rollout.

pub mod cli;
pub mod config;
pub mod dedup;
pub mod error;
pub mod placement;
pub mod planner;
pub mod predictor;
pub mod profile;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};
