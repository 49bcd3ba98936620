use thiserror::Error;

use crate::Step;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid loop model: {0}")]
    InvalidModel(String),

    #[error("riccati iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    Synthesis { iterations: usize, last_change: f64 },

    #[error("closed loop is not stable (spectral radius {0})")]
    Unstable(f64),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("input for step {needed} is no longer retained (oldest retained step {oldest})")]
    InputWindow { needed: Step, oldest: Step },

    #[error("trajectory has {have} samples, window needs {needed}")]
    TrajectoryTooShort { needed: usize, have: usize },

    #[error("cost window index {0} outside 0..=4")]
    WindowIndex(usize),

    #[error("admission of step {gen_step} is not newer than outstanding step {last}")]
    OutOfOrderAdmission { gen_step: Step, last: Step },

    #[error("controller ticked step {got}, expected {expected}")]
    TickOrder { expected: Step, got: Step },

    #[error("not enough samples to fit a delay curve ({have} < {needed})")]
    CurveUnavailable { have: usize, needed: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
