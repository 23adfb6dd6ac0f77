use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::time::SimTime;
use crate::error::SimError;
use crate::ids::EntityId;

/// Issue-order sequence number of a scheduled event. Unique per run and
/// doubles as the event's handle for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    MessageDelivery,
    AckTimeout,
    HealthProbe,
    FaultAction,
    WorkArrival,
    ProcessingDone,
    TakeoverTimer,
    /// Orchestrator lifecycle steps: restarts, startups, migrations and
    /// rolling-update progress.
    UpdateStep,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::MessageDelivery => "MessageDelivery",
            EventKind::AckTimeout => "AckTimeout",
            EventKind::HealthProbe => "HealthProbe",
            EventKind::FaultAction => "FaultAction",
            EventKind::WorkArrival => "WorkArrival",
            EventKind::ProcessingDone => "ProcessingDone",
            EventKind::TakeoverTimer => "TakeoverTimer",
            EventKind::UpdateStep => "UpdateStep",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Event<P> {
    pub id: EventId,
    pub fire_at: SimTime,
    pub kind: EventKind,
    pub target: EntityId,
    pub payload: P,
}

impl<P> Event<P> {
    pub fn seq(&self) -> u64 {
        self.id.0
    }
}

/// Virtual clock plus the pending-event set, ordered by `(fire_at, seq)`.
///
/// Cancelled events are removed from the pending map and their heap entry is
/// skipped lazily when it surfaces.
#[derive(Debug)]
pub struct Scheduler<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, Event<P>>,
    fired: u64,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            pending: HashMap::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events fired so far.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        kind: EventKind,
        target: EntityId,
        payload: P,
    ) -> Result<EventId, SimError> {
        if fire_at < self.now {
            return Err(SimError::SchedulingInPast {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let id = EventId(seq);
        self.heap.push(Reverse((fire_at, seq)));
        self.pending.insert(
            seq,
            Event {
                id,
                fire_at,
                kind,
                target,
                payload,
            },
        );
        Ok(id)
    }

    /// Schedules `delay` microseconds after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: u64, kind: EventKind, target: EntityId, payload: P) -> EventId {
        let at = self.now + delay;
        self.schedule(at, kind, target, payload)
            .expect("relative schedule cannot be in the past")
    }

    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id.0).is_some()
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.pending.contains_key(&id.0)
    }

    /// Pops the next live event whose time is within `horizon`, advancing the
    /// clock to its fire time. Events beyond the horizon stay queued.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<Event<P>> {
        while let Some(&Reverse((at, seq))) = self.heap.peek() {
            if at > horizon {
                return None;
            }
            self.heap.pop();
            if let Some(ev) = self.pending.remove(&seq) {
                debug_assert!(ev.fire_at >= self.now);
                self.now = ev.fire_at;
                self.fired += 1;
                return Some(ev);
            }
        }
        None
    }

    /// Advances the clock without firing anything (used to close a run at its
    /// horizon).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}
