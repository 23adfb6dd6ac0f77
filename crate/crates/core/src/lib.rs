//! Deterministic discrete-event simulation of an FX trading core, comparing
//! a replicated monolith with a bus-integrated microservice layout under
//! node loss, partitions and rolling updates.
//!
//! Same scenario, same seed: byte-identical trace and report.

pub mod bus;
pub mod discovery;
pub mod engine;
pub mod error;
pub mod events;
pub mod ids;
pub mod metrics;
pub mod orchestrator;
pub mod presets;
pub mod scenario;
pub mod sim_core;
pub mod topology;
pub mod workload;

pub use engine::{run, RunOutput};
pub use error::{RunError, SimError};
pub use metrics::{compare, ComparisonTable, MetricsReport};
pub use presets::PresetKind;
pub use scenario::{emit, validate, Scenario, ScenarioFile};
