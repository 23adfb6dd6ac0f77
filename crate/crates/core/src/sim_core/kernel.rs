use super::event::{EventKind, Scheduler};
use super::rng::RngStreams;
use super::time::SimTime;
use super::trace::{Outcome, Trace};
use crate::ids::{EntityId, Names};

/// Clock, queue, random streams and trace bundled for the modules that drive
/// a run. Trace records are stamped with the current time and the kind of the
/// event being handled.
#[derive(Debug)]
pub struct Kernel<P> {
    pub sched: Scheduler<P>,
    pub rng: RngStreams,
    pub trace: Trace,
    kind: EventKind,
}

impl<P> Kernel<P> {
    pub fn new(seed: u64, names: Names) -> Self {
        Kernel {
            sched: Scheduler::new(),
            rng: RngStreams::new(seed),
            trace: Trace::new(names),
            kind: EventKind::FaultAction,
        }
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn current_kind(&self) -> EventKind {
        self.kind
    }

    pub fn set_current_kind(&mut self, kind: EventKind) {
        self.kind = kind;
    }

    pub fn record(&mut self, entity: EntityId, outcome: Outcome) {
        let now = self.sched.now();
        self.trace.push(now, entity, self.kind, outcome);
    }
}
