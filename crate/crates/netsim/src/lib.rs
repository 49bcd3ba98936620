//! Seeded discrete-event simulation of networked control loops sharing a
//! lossy multi-hop network.

pub mod config;
pub mod error;
pub mod sim;

pub use config::{BackgroundFlow, HopKind, HopModel, PolicyConfig, ScenarioConfig, ServiceTime};
pub use error::{Error, Result};
pub use sim::{aoi_trace, run, LoopResult, RunResult};
