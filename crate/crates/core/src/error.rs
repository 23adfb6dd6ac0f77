use thiserror::Error;

use crate::scenario::ValidationErrors;
use crate::sim_core::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event scheduled at {fire_at} but clock is already at {now}")]
    SchedulingInPast { fire_at: SimTime, now: SimTime },
    #[error("unknown rng stream `{0}`")]
    UnknownStream(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("conflicting redeclaration of {0}")]
    DeclarationConflict(String),
    #[error("publisher on node {0} cannot reach any broker member")]
    BrokerUnreachable(String),
    #[error("no healthy instance of `{0}`")]
    NoHealthyInstance(String),
    #[error("placement of `{service}` needs {needed} up nodes, found {available}")]
    InsufficientNodes {
        service: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("rolling update of `{0}` aborted: new version failed health checks")]
    UpdateAborted(String),
    #[error("reports are not comparable: {0}")]
    MismatchedScenario(String),
}

/// Failure of a whole run. Faults injected by the scenario are simulation
/// content and never surface here.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario is invalid:\n{0}")]
    Validation(ValidationErrors),
    #[error("internal invariant violated at t={time}us: {message}")]
    Invariant { time: SimTime, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl From<ValidationErrors> for RunError {
    fn from(e: ValidationErrors) -> Self {
        RunError::Validation(e)
    }
}
