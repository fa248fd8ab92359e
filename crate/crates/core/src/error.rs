use thiserror::Error;

/// Failures surfaced by the controller, verifier and simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("admissible input set is empty: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("gain level gamma={gamma} violates the admissibility threshold {threshold}")]
    Admissibility { gamma: f64, threshold: f64 },
    #[error("true input vector is not in the admissible set: {0}")]
    NotAdmissible(String),
    #[error("disturbance energy is zero; ratio undefined (accumulated cost {cost})")]
    UndefinedRatio { cost: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DualError>;
