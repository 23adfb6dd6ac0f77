//! Message broker: exchanges, queues and bindings with round-robin consumer
//! dispatch, acknowledgement timeouts, bounded redelivery, an error queue,
//! and an availability-preferring partition mode.
//!
//! While the network is partitioned every group holding at least one live
//! broker member runs its own side of each queue. The side with the most
//! members keeps the pre-partition state; the others start empty. On heal the
//! minority sides' pending and unacknowledged messages are re-enqueued into
//! the merged queues, so duplicates are possible and loss is not.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::events::{AckRef, Body, DeliveryRef, Payload, PayloadKind, Publish};
use crate::ids::{EntityId, ExchangeId, MessageId, NodeId, QueueId, ReplicaId};
use crate::sim_core::{EventId, EventKind, Kernel, Outcome, SimTime};
use crate::topology::{Topology, Traffic};

pub const ERROR_QUEUE: &str = "error";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusConfig {
    pub ack_timeout_us: u64,
    pub max_redeliveries: u32,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            ack_timeout_us: 5_000_000,
            max_redeliveries: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    LoadBalanced,
    Broadcast,
}

/// Literal key, or a prefix wildcard written `prefix*` (for example `trade.*`
/// matches `trade.spot`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RoutingPattern {
    Literal(String),
    Prefix(String),
}

impl RoutingPattern {
    pub fn parse(s: &str) -> Self {
        match s.strip_suffix('*') {
            Some(prefix) => RoutingPattern::Prefix(prefix.to_string()),
            None => RoutingPattern::Literal(s.to_string()),
        }
    }

    pub fn matches(&self, key: &str) -> bool {
        match self {
            RoutingPattern::Literal(l) => l == key,
            RoutingPattern::Prefix(p) => key.starts_with(p.as_str()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorReason {
    Unroutable,
    Exhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub exchange: ExchangeId,
    pub queue: QueueId,
    pub pattern: RoutingPattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exchange {
    pub id: ExchangeId,
    pub name: String,
    pub bindings: Vec<Binding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MQueue {
    pub id: QueueId,
    pub name: String,
    pub mode: QueueMode,
    pub is_error_queue: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageState {
    Pending,
    Unacked {
        consumer: ReplicaId,
        attempt: u32,
        deadline: EventId,
    },
    Acked,
    ErrorQueued(ErrorReason),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub id: MessageId,
    /// `None` only for unroutable publishes.
    pub queue: Option<QueueId>,
    pub routing_key: String,
    pub payload_kind: PayloadKind,
    pub body: Body,
    pub published_at: SimTime,
    pub delivery_count: u32,
    pub state: MessageState,
    side: usize,
    last_consumer: Option<ReplicaId>,
}

impl Message {
    /// Broker side (partition group) that owns the message.
    pub fn side(&self) -> usize {
        self.side
    }
}

#[derive(Clone, Debug, Default)]
struct QueueSide {
    pending: VecDeque<MessageId>,
    consumers: Vec<ReplicaId>,
    rr_cursor: usize,
    unacked: BTreeSet<MessageId>,
}

#[derive(Clone, Debug)]
struct Side {
    group: u32,
    queues: Vec<QueueSide>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Subscription {
    queue: QueueId,
    replica: ReplicaId,
    node: NodeId,
}

/// Outcome of an acknowledgement reaching the broker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AckResult {
    Acked,
    Duplicate,
    /// The message exists on another side of a partition.
    Unknown,
}

/// Snapshot of every message's fate, for conservation checks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MessageLedger {
    pub published: BTreeSet<MessageId>,
    pub acked: BTreeSet<MessageId>,
    pub error_queued: BTreeSet<MessageId>,
    pub pending: BTreeSet<MessageId>,
}

#[derive(Clone, Debug)]
pub struct Broker {
    pub config: BusConfig,
    exchanges: Vec<Exchange>,
    queues: Vec<MQueue>,
    sides: Vec<Side>,
    messages: Vec<Message>,
    error_entries: Vec<(MessageId, ErrorReason)>,
    subs: Vec<Subscription>,
    members: Vec<NodeId>,
}

impl Broker {
    pub fn new(config: BusConfig) -> Self {
        let mut b = Broker {
            config,
            exchanges: Vec::new(),
            queues: Vec::new(),
            sides: vec![Side {
                group: 0,
                queues: Vec::new(),
            }],
            messages: Vec::new(),
            error_entries: Vec::new(),
            subs: Vec::new(),
            members: Vec::new(),
        };
        b.queues.push(MQueue {
            id: QueueId(0),
            name: ERROR_QUEUE.to_string(),
            mode: QueueMode::LoadBalanced,
            is_error_queue: true,
        });
        b.sides[0].queues.push(QueueSide::default());
        b
    }

    pub fn declare_exchange(&mut self, name: &str) -> Result<ExchangeId, SimError> {
        if name.is_empty() {
            return Err(SimError::UnknownEntity("exchange name must not be empty".into()));
        }
        if let Some(id) = self.exchange_id(name) {
            return Ok(id);
        }
        let id = ExchangeId(self.exchanges.len() as u32);
        self.exchanges.push(Exchange {
            id,
            name: name.to_string(),
            bindings: Vec::new(),
        });
        Ok(id)
    }

    pub fn declare_queue(&mut self, name: &str, mode: QueueMode) -> Result<QueueId, SimError> {
        if name.is_empty() {
            return Err(SimError::UnknownEntity("queue name must not be empty".into()));
        }
        if let Some(id) = self.queue_id(name) {
            let q = &self.queues[id.idx()];
            if q.mode != mode || q.is_error_queue {
                return Err(SimError::DeclarationConflict(format!("queue `{name}`")));
            }
            return Ok(id);
        }
        let id = QueueId(self.queues.len() as u32);
        self.queues.push(MQueue {
            id,
            name: name.to_string(),
            mode,
            is_error_queue: false,
        });
        for side in &mut self.sides {
            side.queues.push(QueueSide::default());
        }
        Ok(id)
    }

    pub fn bind(&mut self, exchange: &str, queue: &str, pattern: &str) -> Result<(), SimError> {
        let ex = self
            .exchange_id(exchange)
            .ok_or_else(|| SimError::UnknownEntity(format!("exchange `{exchange}`")))?;
        let q = self
            .queue_id(queue)
            .ok_or_else(|| SimError::UnknownEntity(format!("queue `{queue}`")))?;
        let binding = Binding {
            exchange: ex,
            queue: q,
            pattern: RoutingPattern::parse(pattern),
        };
        let bindings = &mut self.exchanges[ex.idx()].bindings;
        if !bindings.contains(&binding) {
            bindings.push(binding);
        }
        Ok(())
    }

    pub fn exchange_id(&self, name: &str) -> Option<ExchangeId> {
        self.exchanges.iter().find(|e| e.name == name).map(|e| e.id)
    }

    pub fn queue_id(&self, name: &str) -> Option<QueueId> {
        self.queues.iter().find(|q| q.name == name).map(|q| q.id)
    }

    pub fn queues(&self) -> &[MQueue] {
        &self.queues
    }

    pub fn exchanges(&self) -> &[Exchange] {
        &self.exchanges
    }

    pub fn message(&self, id: MessageId) -> &Message {
        &self.messages[id.0 as usize]
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn error_queue(&self) -> &[(MessageId, ErrorReason)] {
        &self.error_entries
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn set_members(&mut self, members: Vec<NodeId>) {
        self.members = members;
    }

    /// While partitioned, gives every group that gained a live member an
    /// empty side of its own.
    pub fn ensure_sides(&mut self, topo: &Topology) {
        if self.sides.len() == 1 && !topo.is_partitioned() {
            return;
        }
        let nq = self.queues.len();
        for m in self.members.clone() {
            if !topo.is_up(m) {
                continue;
            }
            let g = topo.group_of(m);
            if self.side_for_group(g).is_none() {
                self.sides.push(Side {
                    group: g,
                    queues: vec![QueueSide::default(); nq],
                });
                self.rebuild_consumers(topo);
            }
        }
    }

    /// Live consumers of `queue` on the side serving `group`, in rotation order.
    pub fn consumers(&self, group: u32, queue: QueueId) -> Vec<ReplicaId> {
        self.sides
            .iter()
            .find(|s| s.group == group)
            .map(|s| s.queues[queue.idx()].consumers.clone())
            .unwrap_or_default()
    }

    pub fn pending_len(&self, queue: QueueId) -> usize {
        self.sides.iter().map(|s| s.queues[queue.idx()].pending.len()).sum()
    }

    /// Messages currently assigned to `replica` and not yet acknowledged.
    pub fn unacked_for(&self, replica: ReplicaId) -> usize {
        self.sides
            .iter()
            .flat_map(|s| s.queues.iter())
            .flat_map(|q| q.unacked.iter())
            .filter(|m| matches!(self.messages[m.0 as usize].state, MessageState::Unacked { consumer, .. } if consumer == replica))
            .count()
    }

    fn side_for_group(&self, group: u32) -> Option<usize> {
        self.sides.iter().position(|s| s.group == group)
    }

    /// Reachable broker member closest to `node`: same node, then same
    /// datacenter, then any, ties broken by member order.
    pub fn nearest_member(&self, topo: &Topology, node: NodeId) -> Option<NodeId> {
        self.members
            .iter()
            .copied()
            .filter(|&m| topo.deliverable(node, m) && self.side_for_group(topo.group_of(m)).is_some())
            .min_by_key(|&m| topo.distance(node, m))
    }

    /// Sends publishes (and optionally an ack) from `from` to its nearest member.
    pub fn send(
        &mut self,
        k: &mut Kernel<Payload>,
        topo: &mut Topology,
        from: NodeId,
        publishes: Vec<Publish>,
        ack: Option<AckRef>,
    ) -> Result<(), SimError> {
        let Some(member) = self.nearest_member(topo, from) else {
            k.record(EntityId::Node(from), Outcome::BrokerUnreachable { from });
            return Err(SimError::BrokerUnreachable(format!("#{}", from.0)));
        };
        let what = if publishes.is_empty() { Traffic::Ack } else { Traffic::Publish };
        topo.deliver(
            k,
            from,
            member,
            what,
            EventKind::MessageDelivery,
            EntityId::Broker,
            Payload::ToBroker {
                from,
                member,
                publishes,
                ack,
            },
        )?;
        Ok(())
    }

    /// A publish/ack packet reached a member.
    pub fn on_arrival(
        &mut self,
        k: &mut Kernel<Payload>,
        topo: &mut Topology,
        from: NodeId,
        member: NodeId,
        publishes: Vec<Publish>,
        ack: Option<AckRef>,
    ) {
        let what = if publishes.is_empty() { Traffic::Ack } else { Traffic::Publish };
        if !topo.arrival_ok(k, from, member, what) {
            return;
        }
        if !self.members.contains(&member) {
            k.record(EntityId::Node(member), Outcome::Dropped { from, to: member, what });
            return;
        }
        let Some(side) = self.side_for_group(topo.group_of(member)) else {
            k.record(EntityId::Broker, Outcome::Note("member-without-side"));
            return;
        };
        for p in publishes {
            self.publish(k, topo, side, p.exchange, &p.routing_key, p.kind, p.body);
        }
        if let Some(a) = ack {
            // NotAssigned is recorded as an anomaly inside `ack`.
            let _ = self.ack(k, topo, side, a);
        }
    }

    /// Routes a message into every matching queue of `side`, or into the error
    /// queue when no binding matches. Returns the matched queues.
    #[allow(clippy::too_many_arguments)]
    pub fn publish(
        &mut self,
        k: &mut Kernel<Payload>,
        topo: &mut Topology,
        side: usize,
        exchange: ExchangeId,
        routing_key: &str,
        kind: PayloadKind,
        body: Body,
    ) -> Vec<QueueId> {
        let mut matched = Vec::new();
        for b in &self.exchanges[exchange.idx()].bindings {
            if b.pattern.matches(routing_key) && !matched.contains(&b.queue) {
                matched.push(b.queue);
            }
        }
        if matched.is_empty() {
            let id = self.new_message(k.now(), None, routing_key, kind, body, side);
            self.messages[id.0 as usize].state = MessageState::ErrorQueued(ErrorReason::Unroutable);
            self.error_entries.push((id, ErrorReason::Unroutable));
            k.record(EntityId::Broker, Outcome::Unroutable { msg: id });
            return matched;
        }
        for &q in &matched {
            let id = self.new_message(k.now(), Some(q), routing_key, kind, body, side);
            self.sides[side].queues[q.idx()].pending.push_back(id);
            k.record(EntityId::Queue(q), Outcome::Published { msg: id, queue: q });
        }
        for &q in &matched {
            self.dispatch(k, topo, side, q);
        }
        matched
    }

    fn new_message(
        &mut self,
        now: SimTime,
        queue: Option<QueueId>,
        routing_key: &str,
        kind: PayloadKind,
        body: Body,
        side: usize,
    ) -> MessageId {
        let id = MessageId(self.messages.len() as u64);
        self.messages.push(Message {
            id,
            queue,
            routing_key: routing_key.to_string(),
            payload_kind: kind,
            body,
            published_at: now,
            delivery_count: 0,
            state: MessageState::Pending,
            side,
            last_consumer: None,
        });
        id
    }

    pub fn subscribe(
        &mut self,
        k: &mut Kernel<Payload>,
        topo: &mut Topology,
        queue: QueueId,
        replica: ReplicaId,
        node: NodeId,
    ) {
        let sub = Subscription { queue, replica, node };
        if self.subs.iter().any(|s| s.queue == queue && s.replica == replica) {
            return;
        }
        self.subs.push(sub);
        if let Some(side) = self.side_for_group(topo.group_of(node)) {
            let qs = &mut self.sides[side].queues[queue.idx()];
            if !qs.consumers.contains(&replica) {
                qs.consumers.push(replica);
            }
            self.dispatch(k, topo, side, queue);
        }
    }

    /// Removes `replica` from every queue's rotation. In-flight messages it
    /// holds stay unacked until acked or timed out.
    pub fn unsubscribe(&mut self, replica: ReplicaId) {
        self.subs.retain(|s| s.replica != replica);
        for side in &mut self.sides {
            for qs in &mut side.queues {
                if let Some(pos) = qs.consumers.iter().position(|&c| c == replica) {
                    qs.consumers.remove(pos);
                    if pos < qs.rr_cursor {
                        qs.rr_cursor -= 1;
                    }
                    if qs.rr_cursor >= qs.consumers.len() {
                        qs.rr_cursor = 0;
                    }
                }
            }
        }
    }

    pub fn is_subscribed(&self, replica: ReplicaId) -> bool {
        self.subs.iter().any(|s| s.replica == replica)
    }

    fn consumer_node(&self, replica: ReplicaId) -> Option<NodeId> {
        self.subs.iter().find(|s| s.replica == replica).map(|s| s.node)
    }

    /// Assigns pending messages at the head of `queue` to consumers in
    /// round-robin order until the queue is empty or has no consumers.
    /// Returns how many messages were dispatched.
    pub fn dispatch(&mut self, k: &mut Kernel<Payload>, topo: &mut Topology, side: usize, queue: QueueId) -> usize {
        let mode = self.queues[queue.idx()].mode;
        let mut n = 0;
        loop {
            let qs = &self.sides[side].queues[queue.idx()];
            if qs.consumers.is_empty() {
                break;
            }
            let Some(&msg) = qs.pending.front() else { break };
            match mode {
                QueueMode::Broadcast => self.dispatch_broadcast(k, topo, side, queue, msg),
                QueueMode::LoadBalanced => self.dispatch_one(k, topo, side, queue, msg),
            }
            n += 1;
        }
        n
    }

    fn dispatch_one(&mut self, k: &mut Kernel<Payload>, topo: &mut Topology, side: usize, queue: QueueId, msg: MessageId) {
        let last = self.messages[msg.0 as usize].last_consumer;
        let qs = &mut self.sides[side].queues[queue.idx()];
        qs.pending.pop_front();
        let len = qs.consumers.len();
        let mut idx = qs.rr_cursor % len;
        if len > 1 && Some(qs.consumers[idx]) == last {
            idx = (idx + 1) % len;
        }
        let consumer = qs.consumers[idx];
        qs.rr_cursor = (idx + 1) % len;
        qs.unacked.insert(msg);

        let m = &mut self.messages[msg.0 as usize];
        m.delivery_count += 1;
        m.last_consumer = Some(consumer);
        let attempt = m.delivery_count;
        let deadline = k.sched.schedule_in(
            self.config.ack_timeout_us,
            EventKind::AckTimeout,
            EntityId::Queue(queue),
            Payload::AckTimeout { msg, attempt },
        );
        m.state = MessageState::Unacked {
            consumer,
            attempt,
            deadline,
        };
        k.record(
            EntityId::Queue(queue),
            Outcome::Dispatched {
                msg,
                queue,
                consumer,
                attempt,
            },
        );
        self.send_delivery(
            k,
            topo,
            DeliveryRef {
                msg,
                queue,
                consumer,
                attempt,
                broadcast: false,
            },
        );
    }

    fn dispatch_broadcast(
        &mut self,
        k: &mut Kernel<Payload>,
        topo: &mut Topology,
        side: usize,
        queue: QueueId,
        msg: MessageId,
    ) {
        let qs = &mut self.sides[side].queues[queue.idx()];
        qs.pending.pop_front();
        let consumers = qs.consumers.clone();
        let m = &mut self.messages[msg.0 as usize];
        m.delivery_count = 1;
        m.state = MessageState::Acked;
        for consumer in consumers {
            k.record(
                EntityId::Queue(queue),
                Outcome::Dispatched {
                    msg,
                    queue,
                    consumer,
                    attempt: 1,
                },
            );
            self.send_delivery(
                k,
                topo,
                DeliveryRef {
                    msg,
                    queue,
                    consumer,
                    attempt: 1,
                    broadcast: true,
                },
            );
        }
    }

    fn send_delivery(&mut self, k: &mut Kernel<Payload>, topo: &mut Topology, d: DeliveryRef) {
        let Some(to) = self.consumer_node(d.consumer) else { return };
        let from = self.nearest_member(topo, to).unwrap_or(to);
        // A drop here is recovered by the ack timeout.
        let _ = topo.deliver(
            k,
            from,
            to,
            Traffic::Delivery,
            EventKind::MessageDelivery,
            EntityId::Replica(d.consumer),
            Payload::ToConsumer { from, to, delivery: d },
        );
    }

    /// Applies an acknowledgement received on `side`.
    pub fn ack(&mut self, k: &mut Kernel<Payload>, _topo: &mut Topology, side: usize, a: AckRef) -> Result<AckResult, SimError> {
        let Some(m) = self.messages.get(a.msg.0 as usize) else {
            k.record(EntityId::Broker, Outcome::AckUnknown { msg: a.msg, consumer: a.consumer });
            return Ok(AckResult::Unknown);
        };
        let queue = m.queue.unwrap_or(QueueId(0));
        if m.side != side {
            k.record(EntityId::Queue(queue), Outcome::AckUnknown { msg: a.msg, consumer: a.consumer });
            return Ok(AckResult::Unknown);
        }
        match m.state {
            MessageState::Unacked {
                consumer,
                attempt,
                deadline,
            } if consumer == a.consumer && attempt == a.attempt => {
                k.sched.cancel(deadline);
                self.messages[a.msg.0 as usize].state = MessageState::Acked;
                self.sides[side].queues[queue.idx()].unacked.remove(&a.msg);
                k.record(EntityId::Queue(queue), Outcome::Acked { msg: a.msg, consumer: a.consumer });
                Ok(AckResult::Acked)
            }
            MessageState::Acked => {
                k.record(EntityId::Queue(queue), Outcome::DuplicateAck { msg: a.msg, consumer: a.consumer });
                Ok(AckResult::Duplicate)
            }
            _ => {
                k.record(EntityId::Queue(queue), Outcome::NotAssigned { msg: a.msg, consumer: a.consumer });
                Err(SimError::UnknownEntity(format!(
                    "ack for {} from a consumer it is not assigned to",
                    a.msg
                )))
            }
        }
    }

    /// Handles an expired acknowledgement deadline: retry at the queue head or
    /// move to the error queue once the redelivery budget is spent.
    pub fn on_ack_timeout(&mut self, k: &mut Kernel<Payload>, topo: &mut Topology, msg: MessageId, attempt: u32) {
        let m = &self.messages[msg.0 as usize];
        let MessageState::Unacked { attempt: cur, .. } = m.state else { return };
        if cur != attempt {
            return;
        }
        let queue = m.queue.expect("unacked messages always belong to a queue");
        let side = m.side;
        let count = m.delivery_count;
        self.sides[side].queues[queue.idx()].unacked.remove(&msg);
        if count <= self.config.max_redeliveries {
            self.messages[msg.0 as usize].state = MessageState::Pending;
            self.sides[side].queues[queue.idx()].pending.push_front(msg);
            k.record(
                EntityId::Queue(queue),
                Outcome::Redelivery {
                    msg,
                    delivery_count: count,
                },
            );
            self.dispatch(k, topo, side, queue);
        } else {
            self.messages[msg.0 as usize].state = MessageState::ErrorQueued(ErrorReason::Exhausted);
            self.error_entries.push((msg, ErrorReason::Exhausted));
            k.record(
                EntityId::Queue(queue),
                Outcome::ErrorQueued {
                    msg,
                    reason: ErrorReason::Exhausted,
                },
            );
        }
    }

    fn rebuild_consumers(&mut self, topo: &Topology) {
        for side in &mut self.sides {
            for qs in &mut side.queues {
                qs.consumers.clear();
                qs.rr_cursor = 0;
            }
        }
        for sub in &self.subs {
            let g = topo.group_of(sub.node);
            if let Some(side) = self.sides.iter_mut().find(|s| s.group == g) {
                let qs = &mut side.queues[sub.queue.idx()];
                if !qs.consumers.contains(&sub.replica) {
                    qs.consumers.push(sub.replica);
                }
            }
        }
    }

    /// Splits into one side per partition group that holds a live member.
    pub fn on_partition(&mut self, k: &mut Kernel<Payload>, topo: &mut Topology) {
        let mut per_group: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
        for m in self.members.clone() {
            if topo.is_up(m) {
                per_group.entry(topo.group_of(m)).or_default().push(m);
            }
        }
        let majority = per_group
            .iter()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.1[0].cmp(&a.1[0])))
            .map(|(g, _)| *g)
            .unwrap_or(u32::MAX);
        let nq = self.queues.len();
        let mut primary = self.sides.swap_remove(0);
        primary.group = majority;
        let mut sides = vec![primary];
        for &g in per_group.keys() {
            if g != majority {
                sides.push(Side {
                    group: g,
                    queues: vec![QueueSide::default(); nq],
                });
            }
        }
        self.sides = sides;
        self.rebuild_consumers(topo);
        k.record(
            EntityId::Broker,
            Outcome::Partitioned {
                groups: self.sides.len() as u32,
            },
        );
        for q in 0..nq {
            self.dispatch(k, topo, 0, QueueId(q as u32));
        }
    }

    /// Merges minority sides back after the network heals.
    pub fn on_heal(&mut self, k: &mut Kernel<Payload>, topo: &mut Topology) {
        k.record(EntityId::Broker, Outcome::Resync);
        let nq = self.queues.len();
        let minority: Vec<Side> = self.sides.drain(1..).collect();
        self.sides[0].group = 0;
        for side in minority {
            for (qi, qs) in side.queues.into_iter().enumerate() {
                let mut moved: Vec<MessageId> = qs.pending.into_iter().collect();
                moved.extend(qs.unacked.iter().copied());
                for msg in moved {
                    let m = &mut self.messages[msg.0 as usize];
                    if let MessageState::Unacked { deadline, .. } = m.state {
                        k.sched.cancel(deadline);
                    }
                    m.state = MessageState::Pending;
                    m.side = 0;
                    self.sides[0].queues[qi].pending.push_back(msg);
                    k.record(EntityId::Queue(QueueId(qi as u32)), Outcome::Reenqueued { msg });
                }
            }
        }
        self.rebuild_consumers(topo);
        for q in 0..nq {
            self.dispatch(k, topo, 0, QueueId(q as u32));
        }
    }

    /// Side index currently serving `node`'s partition group.
    pub fn side_of_node(&self, topo: &Topology, node: NodeId) -> Option<usize> {
        self.side_for_group(topo.group_of(node))
    }

    pub fn ledger(&self) -> MessageLedger {
        let mut l = MessageLedger::default();
        for m in &self.messages {
            l.published.insert(m.id);
            match m.state {
                MessageState::Acked => l.acked.insert(m.id),
                MessageState::ErrorQueued(_) => l.error_queued.insert(m.id),
                MessageState::Pending | MessageState::Unacked { .. } => l.pending.insert(m.id),
            };
        }
        l
    }

    /// Checks the structural invariants; used by the engine after each event
    /// in debug builds and by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        for side in &self.sides {
            for (qi, qs) in side.queues.iter().enumerate() {
                if qs.rr_cursor >= qs.consumers.len().max(1) {
                    return Err(format!("rr_cursor out of range on queue {qi}"));
                }
                for m in &qs.pending {
                    if self.messages[m.0 as usize].state != MessageState::Pending {
                        return Err(format!("{m} listed pending in wrong state"));
                    }
                }
            }
        }
        for m in &self.messages {
            if !matches!(m.state, MessageState::ErrorQueued(_)) && m.delivery_count > self.config.max_redeliveries + 1 {
                return Err(format!("{} delivered {} times", m.id, m.delivery_count));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{Names, ServiceId};
    use crate::sim_core::Event;
    use crate::topology::{LatencyModel, NodeStatus, NETWORK_STREAM};
    use crate::workload::Stage;

    struct Rig {
        k: Kernel<Payload>,
        topo: Topology,
        bus: Broker,
    }

    const N1: NodeId = NodeId(0);
    const N2: NodeId = NodeId(1);

    fn rig() -> Rig {
        let layout = vec![
            ("dc1".to_string(), vec![("n1".to_string(), 4, NodeStatus::Up)]),
            ("dc2".to_string(), vec![("n2".to_string(), 4, NodeStatus::Up)]),
        ];
        let topo = Topology::new(&layout, LatencyModel::default());
        let mut k = Kernel::new(1, Names::default());
        k.rng.register(NETWORK_STREAM);
        let mut bus = Broker::new(BusConfig::default());
        bus.set_members(vec![N1, N2]);
        bus.declare_exchange("work").unwrap();
        bus.declare_queue("work-q", QueueMode::LoadBalanced).unwrap();
        bus.bind("work", "work-q", "job.*").unwrap();
        Rig { k, topo, bus }
    }

    fn c(i: u32) -> ReplicaId {
        ReplicaId::new(ServiceId(0), i)
    }

    fn body() -> Body {
        Body {
            request: None,
            stage: Stage::Custom,
        }
    }

    impl Rig {
        fn publish(&mut self, key: &str) -> Vec<QueueId> {
            let ex = self.bus.exchange_id("work").unwrap();
            self.bus
                .publish(&mut self.k, &mut self.topo, 0, ex, key, PayloadKind::TradeRequest, body())
        }

        /// Fires every event, acking deliveries for consumers in `ackers`.
        fn run(&mut self, ackers: &[ReplicaId]) -> Vec<(ReplicaId, MessageId, u32)> {
            let mut got = Vec::new();
            while let Some(Event { payload, .. }) = self.k.sched.pop_until(SimTime(u64::MAX / 2)) {
                match payload {
                    Payload::ToConsumer { delivery, .. } => {
                        got.push((delivery.consumer, delivery.msg, delivery.attempt));
                        if ackers.contains(&delivery.consumer) {
                            let a = AckRef {
                                msg: delivery.msg,
                                consumer: delivery.consumer,
                                attempt: delivery.attempt,
                            };
                            self.bus.ack(&mut self.k, &mut self.topo, 0, a).unwrap();
                        }
                    }
                    Payload::AckTimeout { msg, attempt } => {
                        self.bus.on_ack_timeout(&mut self.k, &mut self.topo, msg, attempt)
                    }
                    _ => {}
                }
            }
            got
        }
    }

    #[test]
    fn redeclaration_is_idempotent_or_conflicts() {
        let mut r = rig();
        let q = r.bus.declare_queue("work-q", QueueMode::LoadBalanced).unwrap();
        assert_eq!(q, r.bus.queue_id("work-q").unwrap());
        assert_eq!(r.bus.queues().len(), 2);
        assert!(matches!(
            r.bus.declare_queue("work-q", QueueMode::Broadcast),
            Err(SimError::DeclarationConflict(_))
        ));
        assert!(matches!(r.bus.bind("nope", "work-q", "x"), Err(SimError::UnknownEntity(_))));
    }

    #[test]
    fn prefix_binding_routes() {
        let mut r = rig();
        assert_eq!(r.publish("job.spot"), vec![r.bus.queue_id("work-q").unwrap()]);
        assert!(r.publish("other").is_empty());
        assert_eq!(r.bus.error_queue(), &[(MessageId(1), ErrorReason::Unroutable)]);
    }

    #[test]
    fn two_bindings_give_independent_copies() {
        let mut r = rig();
        r.bus.declare_queue("audit-q", QueueMode::LoadBalanced).unwrap();
        r.bus.bind("work", "audit-q", "job.spot").unwrap();
        let qs = r.publish("job.spot");
        assert_eq!(qs.len(), 2);
        let a = r.bus.queue_id("work-q").unwrap();
        let b = r.bus.queue_id("audit-q").unwrap();
        r.bus.subscribe(&mut r.k, &mut r.topo, a, c(0), N1);
        r.bus.subscribe(&mut r.k, &mut r.topo, b, c(1), N1);
        let got = r.run(&[c(0)]);
        // c1 never acks its copy: four attempts then the error queue
        assert_eq!(got.iter().filter(|g| g.0 == c(0)).count(), 1);
        assert_eq!(got.iter().filter(|g| g.0 == c(1)).count(), 4);
        let l = r.bus.ledger();
        assert_eq!(l.acked.len(), 1);
        assert_eq!(l.error_queued.len(), 1);
    }

    #[test]
    fn round_robin_three_consumers_six_messages() {
        let mut r = rig();
        let q = r.bus.queue_id("work-q").unwrap();
        for i in 0..3 {
            r.bus.subscribe(&mut r.k, &mut r.topo, q, c(i), N1);
        }
        for _ in 0..6 {
            r.publish("job.a");
        }
        let got = r.run(&[c(0), c(1), c(2)]);
        let order: Vec<u32> = got.iter().map(|g| g.0.index).collect();
        assert_eq!(order, vec![0, 1, 2, 0, 1, 2]);
        assert!(r.bus.check_invariants().is_ok());
    }

    #[test]
    fn never_acking_pair_alternates_then_error_queue() {
        let mut r = rig();
        let q = r.bus.queue_id("work-q").unwrap();
        r.bus.subscribe(&mut r.k, &mut r.topo, q, c(0), N1);
        r.bus.subscribe(&mut r.k, &mut r.topo, q, c(1), N2);
        r.publish("job.a");
        let got = r.run(&[]);
        let order: Vec<u32> = got.iter().map(|g| g.0.index).collect();
        assert_eq!(order, vec![0, 1, 0, 1]);
        assert_eq!(got.iter().map(|g| g.2).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(r.bus.error_queue(), &[(MessageId(0), ErrorReason::Exhausted)]);
    }

    #[test]
    fn single_consumer_retried_until_exhausted() {
        let mut r = rig();
        let q = r.bus.queue_id("work-q").unwrap();
        r.bus.subscribe(&mut r.k, &mut r.topo, q, c(0), N1);
        r.publish("job.a");
        let got = r.run(&[]);
        assert_eq!(got.len(), 4);
        assert!(got.iter().all(|g| g.0 == c(0)));
    }

    #[test]
    fn ack_edge_cases() {
        let mut r = rig();
        let q = r.bus.queue_id("work-q").unwrap();
        r.bus.subscribe(&mut r.k, &mut r.topo, q, c(0), N1);
        r.publish("job.a");
        let m = MessageId(0);
        let wrong = AckRef { msg: m, consumer: c(5), attempt: 1 };
        assert!(r.bus.ack(&mut r.k, &mut r.topo, 0, wrong).is_err());
        assert!(matches!(r.k.trace.records().last().unwrap().outcome, Outcome::NotAssigned { .. }));
        let right = AckRef { msg: m, consumer: c(0), attempt: 1 };
        assert_eq!(r.bus.ack(&mut r.k, &mut r.topo, 0, right).unwrap(), AckResult::Acked);
        assert_eq!(r.bus.ack(&mut r.k, &mut r.topo, 0, right).unwrap(), AckResult::Duplicate);
        // the timeout was cancelled: nothing left but the delivery event
        let rest = r.run(&[]);
        assert_eq!(rest.len(), 1);
        assert_eq!(r.bus.message(m).delivery_count, 1);
    }

    #[test]
    fn no_consumer_means_message_waits() {
        let mut r = rig();
        r.publish("job.a");
        assert!(r.run(&[]).is_empty());
        assert_eq!(r.bus.ledger().pending.len(), 1);
    }

    #[test]
    fn partition_sides_and_heal_merge() {
        let mut r = rig();
        let q = r.bus.queue_id("work-q").unwrap();
        r.bus.subscribe(&mut r.k, &mut r.topo, q, c(0), N1);
        r.topo.apply_partition(&[vec![N1], vec![N2]]).unwrap();
        r.bus.on_partition(&mut r.k, &mut r.topo);
        let ex = r.bus.exchange_id("work").unwrap();
        let s2 = r.bus.side_of_node(&r.topo, N2).unwrap();
        let s1 = r.bus.side_of_node(&r.topo, N1).unwrap();
        assert_ne!(s1, s2);
        for _ in 0..3 {
            r.bus.publish(&mut r.k, &mut r.topo, s2, ex, "job.x", PayloadKind::TradeRequest, body());
        }
        // no consumer on n2's side: they wait
        assert_eq!(r.bus.pending_len(q), 3);
        r.topo.heal();
        r.bus.on_heal(&mut r.k, &mut r.topo);
        let got = r.run(&[c(0)]);
        assert_eq!(got.len(), 3);
        let l = r.bus.ledger();
        assert_eq!(l.acked, l.published);
    }
}
