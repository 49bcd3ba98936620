use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed results file {file}: {reason}")]
    Format { file: String, reason: String },
    #[error("policy `{0}` not present in the results")]
    MissingPolicy(String),
    #[error("simulation failed: {0}")]
    Simulation(#[from] vou_netsim::Error),
    #[error("aggregate does not match the raw results: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
