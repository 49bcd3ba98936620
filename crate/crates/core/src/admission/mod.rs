//! Admission decisions: delay prediction, transmission cost, threshold and
//! rate adaptation, and the policies that combine them.

pub mod acp;
pub mod delay_curve;
pub mod policy;
pub mod threshold;

pub use acp::{acp_target_rate, AcpConfig, AcpState, RateAction};
pub use delay_curve::{fit_delay_curve, transmission_cost, DelayCurve};
pub use policy::{decide, Decision, PolicyKind, PolicyParams, SensorView};
pub use threshold::{adapt_threshold, ThresholdConfig, ThresholdState};
