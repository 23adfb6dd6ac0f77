//! Deterministic discrete-event kernel: virtual clock, ordered event queue,
//! named random streams, and the run trace.

mod event;
mod kernel;
mod rng;
mod time;
mod trace;

pub use event::{Event, EventId, EventKind, Scheduler};
pub use kernel::Kernel;
pub use rng::{Dist, RngStreams};
pub use time::SimTime;
pub use trace::{Outcome, Trace, TraceRecord};
