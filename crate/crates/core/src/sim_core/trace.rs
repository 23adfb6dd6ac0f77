//! Structured run trace and its line-oriented text export.
//!
//! Export format, one record per line, fields separated by single spaces:
//! `<time_us> <entity> <kind> <outcome>`. The outcome is the remainder of
//! the line and uses `key=value` tokens.

use std::fmt::Write as _;
use std::io;

use super::event::EventKind;
use super::time::SimTime;
use crate::bus::ErrorReason;
use crate::discovery::Health;
use crate::ids::{EntityId, MessageId, Names, NodeId, QueueId, ReplicaId, RequestId, ServiceId};
use crate::orchestrator::ReplicaState;
use crate::topology::Traffic;
use crate::workload::{DataSource, RequestKind, RequestOutcome, Stage};

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Arrival { request: RequestId, kind: RequestKind },
    Rejected { request: RequestId },
    Stage { request: RequestId, stage: Stage, replica: ReplicaId },
    DataAccess { request: RequestId, source: DataSource, latency_us: u64 },
    RequestDone { request: RequestId, outcome: RequestOutcome, latency_us: u64 },
    DirectCall { request: RequestId, caller: ReplicaId, callee: ReplicaId },
    CallRefused { caller: ReplicaId, callee: ReplicaId },
    RefAdvanced { caller: ReplicaId, to: ReplicaId, index: u32 },

    Published { msg: MessageId, queue: QueueId },
    Unroutable { msg: MessageId },
    BrokerUnreachable { from: NodeId },
    Dispatched { msg: MessageId, queue: QueueId, consumer: ReplicaId, attempt: u32 },
    Processed { msg: MessageId, queue: QueueId, consumer: ReplicaId, broadcast: bool },
    Lost { msg: MessageId, consumer: ReplicaId },
    Acked { msg: MessageId, consumer: ReplicaId },
    DuplicateAck { msg: MessageId, consumer: ReplicaId },
    NotAssigned { msg: MessageId, consumer: ReplicaId },
    AckUnknown { msg: MessageId, consumer: ReplicaId },
    Redelivery { msg: MessageId, delivery_count: u32 },
    ErrorQueued { msg: MessageId, reason: ErrorReason },
    Reenqueued { msg: MessageId },
    Resync,

    Dropped { from: NodeId, to: NodeId, what: Traffic },
    NodeDown { node: NodeId },
    NodeUp { node: NodeId },
    NodeUnchanged { node: NodeId },
    Partitioned { groups: u32 },
    Healed,

    ProbeTick,
    Health { replica: ReplicaId, view: u32, from: Health, to: Health },
    Resolved { service: ServiceId, replica: ReplicaId },
    NoHealthyInstance { service: ServiceId },

    ReplicaState { replica: ReplicaId, node: NodeId, from: ReplicaState, to: ReplicaState },
    RestartScheduled { replica: ReplicaId },
    LeaseGranted { replica: ReplicaId },
    LeaseReleased { replica: ReplicaId },
    TakeoverScheduled { replica: ReplicaId },
    TakeoverAbandoned { replica: ReplicaId },
    UpdateStarted { service: ServiceId, version: u32 },
    UpdateCompleted { service: ServiceId, version: u32 },
    UpdateAborted { service: ServiceId, version: u32 },
    Migration { replica: ReplicaId, from: NodeId, to: NodeId },
    Fault { index: u32 },
    Note(&'static str),
}

impl Outcome {
    pub fn render(&self, n: &Names) -> String {
        use Outcome::*;
        match self {
            Arrival { request, kind } => format!("arrival req={request} kind={kind:?}"),
            Rejected { request } => format!("rejected req={request}"),
            Stage { request, stage, replica } => {
                format!("stage req={request} stage={stage:?} by={}", n.replica(*replica))
            }
            DataAccess { request, source, latency_us } => {
                format!("data req={request} source={source:?} latency={latency_us}")
            }
            RequestDone { request, outcome, latency_us } => {
                format!("done req={request} outcome={outcome:?} latency={latency_us}")
            }
            DirectCall { request, caller, callee } => format!(
                "call req={request} from={} to={}",
                n.replica(*caller),
                n.replica(*callee)
            ),
            CallRefused { caller, callee } => {
                format!("call-refused from={} to={}", n.replica(*caller), n.replica(*callee))
            }
            RefAdvanced { caller, to, index } => {
                format!("ref-advanced by={} to={} index={index}", n.replica(*caller), n.replica(*to))
            }
            Published { msg, queue } => format!("published msg={msg} queue={}", n.queue(*queue)),
            Unroutable { msg } => format!("unroutable msg={msg}"),
            BrokerUnreachable { from } => format!("broker-unreachable from={}", n.node(*from)),
            Dispatched { msg, queue, consumer, attempt } => format!(
                "dispatched msg={msg} queue={} to={} attempt={attempt}",
                n.queue(*queue),
                n.replica(*consumer)
            ),
            Processed { msg, queue, consumer, broadcast } => format!(
                "processed msg={msg} queue={} by={} broadcast={broadcast}",
                n.queue(*queue),
                n.replica(*consumer)
            ),
            Lost { msg, consumer } => format!("lost msg={msg} at={}", n.replica(*consumer)),
            Acked { msg, consumer } => format!("acked msg={msg} by={}", n.replica(*consumer)),
            DuplicateAck { msg, consumer } => {
                format!("duplicate-ack msg={msg} by={}", n.replica(*consumer))
            }
            NotAssigned { msg, consumer } => {
                format!("not-assigned msg={msg} by={}", n.replica(*consumer))
            }
            AckUnknown { msg, consumer } => {
                format!("ack-unknown msg={msg} by={}", n.replica(*consumer))
            }
            Redelivery { msg, delivery_count } => {
                format!("requeued msg={msg} deliveries={delivery_count}")
            }
            ErrorQueued { msg, reason } => format!("error-queued msg={msg} reason={reason:?}"),
            Reenqueued { msg } => format!("reenqueued msg={msg}"),
            Resync => "resync".to_string(),
            Dropped { from, to, what } => format!(
                "dropped {what:?} from={} to={}",
                n.node(*from),
                n.node(*to)
            ),
            NodeDown { node } => format!("node-down {}", n.node(*node)),
            NodeUp { node } => format!("node-up {}", n.node(*node)),
            NodeUnchanged { node } => format!("node-unchanged {}", n.node(*node)),
            Partitioned { groups } => format!("partitioned groups={groups}"),
            Healed => "healed".to_string(),
            ProbeTick => "probe-tick".to_string(),
            Health { replica, view, from, to } => format!(
                "health {} view={view} {from:?}->{to:?}",
                n.replica(*replica)
            ),
            Resolved { service, replica } => {
                format!("resolved {} -> {}", n.service(*service), n.replica(*replica))
            }
            NoHealthyInstance { service } => format!("no-healthy-instance {}", n.service(*service)),
            ReplicaState { replica, node, from, to } => format!(
                "replica {} on={} {from:?}->{to:?}",
                n.replica(*replica),
                n.node(*node)
            ),
            RestartScheduled { replica } => format!("restart-scheduled {}", n.replica(*replica)),
            LeaseGranted { replica } => format!("lease-granted {}", n.replica(*replica)),
            LeaseReleased { replica } => format!("lease-released {}", n.replica(*replica)),
            TakeoverScheduled { replica } => format!("takeover-scheduled {}", n.replica(*replica)),
            TakeoverAbandoned { replica } => format!("takeover-abandoned {}", n.replica(*replica)),
            UpdateStarted { service, version } => {
                format!("update-started {} version={version}", n.service(*service))
            }
            UpdateCompleted { service, version } => {
                format!("update-completed {} version={version}", n.service(*service))
            }
            UpdateAborted { service, version } => {
                format!("update-aborted {} version={version}", n.service(*service))
            }
            Migration { replica, from, to } => format!(
                "migration {} from={} to={}",
                n.replica(*replica),
                n.node(*from),
                n.node(*to)
            ),
            Fault { index } => format!("fault index={index}"),
            Note(s) => format!("note {s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub entity: EntityId,
    pub kind: EventKind,
    pub outcome: Outcome,
}

/// Append-only record of everything that happened in a run.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
    names: Names,
}

impl Trace {
    pub fn new(names: Names) -> Self {
        Trace {
            records: Vec::new(),
            names,
        }
    }

    pub fn push(&mut self, time: SimTime, entity: EntityId, kind: EventKind, outcome: Outcome) {
        self.records.push(TraceRecord {
            time,
            entity,
            kind,
            outcome,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> &Names {
        &self.names
    }

    pub fn set_names(&mut self, names: Names) {
        self.names = names;
    }

    pub fn line(&self, r: &TraceRecord) -> String {
        format!(
            "{} {} {} {}",
            r.time,
            self.names.entity(&r.entity),
            r.kind,
            r.outcome.render(&self.names)
        )
    }

    pub fn export_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 64);
        for r in &self.records {
            let _ = writeln!(out, "{}", self.line(r));
        }
        out
    }

    pub fn write_text<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}", self.line(r))?;
        }
        Ok(())
    }
}
