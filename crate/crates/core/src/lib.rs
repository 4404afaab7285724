//! Jump-type quantum trajectories of a qubit under indirect measurement.

pub mod config;
pub mod coupling;
pub mod discrete;
pub mod error;
pub mod euler;
pub mod exact;
pub mod experiment;
pub mod flow;
pub mod poisson;
pub mod qmatrix;
pub mod stats;

pub use error::{Error, Result};
