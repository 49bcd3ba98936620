//! Goal-oriented admission control for sensor updates of networked control
//! loops.
//!
//! A sensor decides per sample whether to hand it to the transport layer.
//! The decision weighs the relevance of the sample for the remote controller
//! against a congestion-dependent transmission cost.

pub mod admission;
pub mod augment;
pub mod belief;
pub mod control;
pub mod error;
pub mod net_stats;

/// Discrete time step of a control loop.
pub type Step = u64;

pub use error::{Error, Result};
