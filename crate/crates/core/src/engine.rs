//! The run loop: wires topology, bus, registry, orchestrator and workload
//! into one deterministic event-driven world.
//!
//! Nodes execute jobs in FIFO order on `capacity` parallel slots. A job
//! belongs to one replica incarnation; if the replica restarts or dies the
//! job is dropped when it would start or finish.

use std::collections::{BTreeMap, VecDeque};

use crate::bus::Broker;
use crate::discovery::{Health, Registry, Transition};
use crate::error::{RunError, SimError};
use crate::events::{AckRef, Body, CallRef, DeliveryRef, Lifecycle, Payload, PayloadKind, Publish};
use crate::ids::{EntityId, ExchangeId, Names, NodeId, ReplicaId, RequestId, ServiceId};
use crate::metrics::{self, InstanceReport, MetricsReport, RequestStats, ServiceReport};
use crate::orchestrator::{
    best_node, place, Behavior, Migration, Orchestrator, Replica, ReplicaState, Role, RollingUpdate,
    UpdatePhase,
};
use crate::presets::PresetKind;
use crate::scenario::{FaultAction, Scenario};
use crate::sim_core::{Event, EventKind, Kernel, Outcome, SimTime, Trace};
use crate::topology::{DcLayout, NodeStatus, Topology, Traffic, NETWORK_STREAM};
use crate::workload::{
    Arrivals, DataSource, Hop, MainframeModel, Request, RequestKind, RequestOutcome, Stage, StaticRefTable,
    ARRIVALS_STREAM, CACHE_STREAM, MIX_STREAM, SERVICE_TIMES_STREAM,
};

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Trace,
    pub requests: Vec<Request>,
    pub broker: Broker,
    pub orchestrator: Orchestrator,
    /// Static dependency tables of monolith front components.
    pub refs: BTreeMap<ReplicaId, StaticRefTable>,
    pub served: BTreeMap<ReplicaId, u64>,
}

/// Runs `scenario` to its horizon.
pub fn run(scenario: &Scenario) -> Result<RunOutput, RunError> {
    let mut w = World::new(scenario)?;
    w.run()?;
    w.finish()
}

#[derive(Clone, Copy, Debug)]
enum Work {
    Ingest { request: RequestId },
    Consume { delivery: DeliveryRef, body: Body },
    Serve { call: CallRef, caller_node: NodeId },
}

#[derive(Clone, Copy, Debug)]
struct Job {
    replica: ReplicaId,
    incarnation: u32,
    work: Work,
    /// Cache instance held for the duration of the job.
    cache: Option<ReplicaId>,
}

#[derive(Clone, Debug, Default)]
struct NodeWork {
    epoch: u32,
    busy: u32,
    queue: VecDeque<u64>,
}

#[derive(Clone, Debug)]
struct Source {
    arrivals: Arrivals,
    start: SimTime,
    end: SimTime,
    n: u64,
    custom: Option<CustomSource>,
}

#[derive(Clone, Debug)]
struct CustomSource {
    node: NodeId,
    exchange: ExchangeId,
    routing_key: String,
    kind: Option<RequestKind>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Roles {
    external: Option<ServiceId>,
    cache: Option<ServiceId>,
    broker: Option<ServiceId>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Exchanges {
    ingress: Option<ExchangeId>,
    business: Option<ExchangeId>,
    responses: Option<ExchangeId>,
}

enum Step {
    Wait,
    Completed,
    Abort(ReplicaId),
}

struct World<'a> {
    s: &'a Scenario,
    k: Kernel<Payload>,
    topo: Topology,
    bus: Broker,
    reg: Registry,
    orch: Orchestrator,
    mainframe: MainframeModel,
    nodes: Vec<NodeWork>,
    jobs: BTreeMap<u64, Job>,
    next_job: u64,
    requests: Vec<Request>,
    sources: Vec<Source>,
    refs: BTreeMap<ReplicaId, StaticRefTable>,
    served: BTreeMap<ReplicaId, u64>,
    roles: Roles,
    ex: Exchanges,
    errors_seen: usize,
}

fn names_of(s: &Scenario) -> Names {
    let mut queues = vec![crate::bus::ERROR_QUEUE.to_string()];
    queues.extend(s.bus.queues.iter().map(|q| q.name.clone()));
    Names {
        nodes: s.node_names(),
        datacenters: s.layout.iter().map(|d| d.name.clone()).collect(),
        services: s.services.iter().map(|x| x.name.clone()).collect(),
        queues,
        exchanges: s.bus.exchanges.clone(),
    }
}

fn request_kind_key(kind: RequestKind) -> &'static str {
    match kind {
        RequestKind::Trade => "trade",
        RequestKind::LineCheck => "linecheck",
    }
}

fn payload_kind(kind: RequestKind) -> PayloadKind {
    match kind {
        RequestKind::Trade => PayloadKind::TradeRequest,
        RequestKind::LineCheck => PayloadKind::LineCheckRequest,
    }
}

impl<'a> World<'a> {
    fn new(s: &'a Scenario) -> Result<Self, RunError> {
        let names = names_of(s);
        let mut k = Kernel::new(s.seed, names);
        for stream in [NETWORK_STREAM, ARRIVALS_STREAM, SERVICE_TIMES_STREAM, CACHE_STREAM, MIX_STREAM] {
            k.rng.register(stream);
        }
        k.set_current_kind(EventKind::UpdateStep);

        let layout: Vec<DcLayout> = s
            .layout
            .iter()
            .map(|d| {
                (
                    d.name.clone(),
                    d.nodes.iter().map(|n| (n.name.clone(), n.capacity, n.status)).collect(),
                )
            })
            .collect();
        let topo = Topology::new(&layout, s.params.latency.clone());

        let mut bus = Broker::new(s.params.bus.clone());
        for e in &s.bus.exchanges {
            bus.declare_exchange(e)?;
        }
        for q in &s.bus.queues {
            bus.declare_queue(&q.name, q.mode)?;
        }
        for b in &s.bus.bindings {
            bus.bind(&b.exchange, &b.queue, &b.pattern)?;
        }

        let mut orch = Orchestrator::new(s.params.failover, s.auto_restart);
        let mut reg = Registry::new(s.params.probe.clone());
        let mut load = BTreeMap::new();
        for spec in &s.services {
            let nodes = place(spec, &topo, &mut load)?;
            let sid = orch.add_service(spec.clone(), &nodes);
            reg.declare(sid, spec.policy);
        }

        let ex = Exchanges {
            ingress: bus.exchange_id("ingress"),
            business: bus.exchange_id("business"),
            responses: bus.exchange_id("responses"),
        };
        let roles = Roles {
            external: orch.with_role(Role::ExternalApi).first().copied(),
            cache: orch.with_role(Role::Cache).first().copied(),
            broker: orch.with_role(Role::Broker).first().copied(),
        };

        let end = SimTime::from_micros(s.workload.end_us.unwrap_or(s.horizon.as_micros()));
        let start = SimTime::from_micros(s.workload.start_us);
        let mut sources = Vec::new();
        if s.preset == PresetKind::Custom {
            for d in &s.workload.sources {
                let node = topo
                    .nodes()
                    .iter()
                    .find(|n| n.name == d.from_node)
                    .map(|n| n.id)
                    .ok_or_else(|| SimError::UnknownNode(d.from_node.clone()))?;
                let exchange = bus
                    .exchange_id(&d.exchange)
                    .ok_or_else(|| SimError::UnknownEntity(format!("exchange `{}`", d.exchange)))?;
                sources.push(Source {
                    arrivals: d.arrivals.clone().unwrap_or_else(|| s.workload.arrivals.clone()),
                    start,
                    end,
                    n: 0,
                    custom: Some(CustomSource {
                        node,
                        exchange,
                        routing_key: d.routing_key.clone(),
                        kind: d.kind,
                    }),
                });
            }
        } else {
            sources.push(Source {
                arrivals: s.workload.arrivals.clone(),
                start,
                end,
                n: 0,
                custom: None,
            });
        }

        let nodes = vec![NodeWork::default(); topo.nodes().len()];
        let mut w = World {
            s,
            k,
            topo,
            bus,
            reg,
            orch,
            mainframe: s.params.mainframe(),
            nodes,
            jobs: BTreeMap::new(),
            next_job: 0,
            requests: Vec::new(),
            sources,
            refs: BTreeMap::new(),
            served: BTreeMap::new(),
            roles,
            ex,
            errors_seen: 0,
        };
        w.boot()?;
        Ok(w)
    }

    /// Brings the system to steady state at t=0: every replica placed,
    /// registered Healthy and subscribed, and all timers armed.
    fn boot(&mut self) -> Result<(), RunError> {
        let reps: Vec<Replica> = self.orch.all().cloned().collect();
        for r in &reps {
            self.k.record(
                EntityId::Replica(r.id),
                Outcome::ReplicaState {
                    replica: r.id,
                    node: r.node,
                    from: ReplicaState::Starting,
                    to: r.state,
                },
            );
            if self.orch.lease_holder(r.id.service) == Some(r.id) {
                self.k.record(EntityId::Orchestrator, Outcome::LeaseGranted { replica: r.id });
            }
            self.reg.register(r.id, r.node, Health::Healthy, false)?;
            self.k.record(
                EntityId::Replica(r.id),
                Outcome::Health {
                    replica: r.id,
                    view: 0,
                    from: Health::Suspect,
                    to: Health::Healthy,
                },
            );
        }
        self.refresh_members();
        for r in &reps {
            if self.should_serve(r.id) {
                self.activate(r.id);
            }
        }
        self.build_refs();

        let interval = self.s.params.probe.interval_us;
        if interval > 0 && interval <= self.s.horizon.as_micros() {
            self.k
                .sched
                .schedule_in(interval, EventKind::HealthProbe, EntityId::Registry, Payload::HealthProbe);
        }
        for (i, f) in self.s.faults.iter().enumerate() {
            self.k.sched.schedule(
                SimTime::from_micros(f.at_us),
                EventKind::FaultAction,
                EntityId::Orchestrator,
                Payload::Fault { index: i as u32 },
            )?;
        }
        for i in 0..self.sources.len() {
            let src = &self.sources[i];
            if let Some(t) = src.arrivals.first(&mut self.k.rng, src.start) {
                if t < src.end {
                    self.k.sched.schedule(
                        t,
                        EventKind::WorkArrival,
                        EntityId::Source(i as u32),
                        Payload::WorkArrival { source: i as u32 },
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Front components reference back components co-located first, then the
    /// following hosts in cyclic order.
    fn build_refs(&mut self) {
        let mut deps: Vec<(NodeId, ReplicaId)> = self
            .orch
            .with_role(Role::RequestService)
            .into_iter()
            .flat_map(|s| self.orch.of_service(s).map(|r| (r.node, r.id)).collect::<Vec<_>>())
            .collect();
        deps.sort();
        let by_host: Vec<ReplicaId> = deps.iter().map(|d| d.1).collect();
        if by_host.is_empty() {
            return;
        }
        for s in self.orch.with_role(Role::ForexApi) {
            let callers: Vec<(ReplicaId, NodeId)> = self.orch.of_service(s).map(|r| (r.id, r.node)).collect();
            for (c, node) in callers {
                let pos = deps.iter().position(|d| d.0 == node).unwrap_or(0);
                self.refs.insert(c, StaticRefTable::cyclic(&by_host, pos));
            }
        }
    }

    fn run(&mut self) -> Result<(), RunError> {
        let horizon = self.s.horizon;
        while let Some(ev) = self.k.sched.pop_until(horizon) {
            self.k.set_current_kind(ev.kind);
            self.handle(ev)?;
            self.scan_error_queue();
            if let Err(message) = self.orch.check_exclusivity() {
                return Err(RunError::Invariant {
                    time: self.k.now(),
                    message,
                });
            }
        }
        self.k.sched.advance_to(horizon);
        Ok(())
    }

    fn handle(&mut self, ev: Event<Payload>) -> Result<(), RunError> {
        match ev.payload {
            Payload::ToBroker {
                from,
                member,
                publishes,
                ack,
            } => {
                self.bus.on_arrival(&mut self.k, &mut self.topo, from, member, publishes, ack);
            }
            Payload::ToConsumer { from, to, delivery } => self.on_delivery(from, to, delivery),
            Payload::AckTimeout { msg, attempt } => {
                self.bus.on_ack_timeout(&mut self.k, &mut self.topo, msg, attempt);
            }
            Payload::HealthProbe => self.on_probe(),
            Payload::Fault { index } => self.on_fault(index)?,
            Payload::WorkArrival { source } => self.on_arrival(source)?,
            Payload::ProcessingDone { node, epoch, job } => self.on_done(node, epoch, job),
            Payload::DirectCall { from, to, call } => self.on_call(from, to, call),
            Payload::DirectReply {
                from,
                to,
                call,
                refused,
            } => self.on_reply(from, to, call, refused),
            Payload::Takeover { service, candidate } => self.on_takeover(service, candidate),
            Payload::Lifecycle(l) => match l {
                Lifecycle::Restart { replica } => self.on_restart(replica),
                Lifecycle::Started { replica, incarnation } => self.on_started(replica, incarnation),
                Lifecycle::UpdatePoll { service } => self.drive_update(service),
                Lifecycle::MigrationPoll { replica } => self.drive_migration(replica),
            },
        }
        Ok(())
    }

    // ---- requests -------------------------------------------------------

    fn on_arrival(&mut self, source: u32) -> Result<(), RunError> {
        let now = self.k.now();
        let id = RequestId(self.requests.len() as u64);
        let (custom, n) = {
            let src = &self.sources[source as usize];
            (src.custom.clone(), src.n)
        };
        let kind = match custom.as_ref().and_then(|c| c.kind) {
            Some(k) => k,
            None => {
                if self.k.rng.chance(MIX_STREAM, self.s.workload.trade_fraction)? {
                    RequestKind::Trade
                } else {
                    RequestKind::LineCheck
                }
            }
        };
        let provider = (n % self.s.workload.providers.max(1) as u64) as u32;
        self.requests.push(Request::new(id, kind, provider, source, now));
        self.k.record(EntityId::Request(id), Outcome::Arrival { request: id, kind });

        match custom {
            Some(c) => {
                let p = Publish {
                    exchange: c.exchange,
                    routing_key: c.routing_key.clone(),
                    kind: payload_kind(kind),
                    body: Body {
                        request: Some(id),
                        stage: Stage::Custom,
                    },
                };
                if self.bus.send(&mut self.k, &mut self.topo, c.node, vec![p], None).is_err() {
                    self.fail(id);
                }
            }
            None => {
                let holder = self.roles.external.and_then(|s| self.orch.lease_holder(s));
                match holder {
                    Some(h) if self.orch.replica(h).state == ReplicaState::Active && self.orch.replica(h).responsive() => {
                        let node = self.orch.replica(h).node;
                        self.enqueue(node, h, Work::Ingest { request: id });
                    }
                    _ => {
                        self.k.record(EntityId::Request(id), Outcome::Rejected { request: id });
                        self.fail(id);
                    }
                }
            }
        }

        let src = &mut self.sources[source as usize];
        src.n += 1;
        if let Some(t) = src.arrivals.next(&mut self.k.rng, src.start, now, n) {
            if t < src.end {
                self.k.sched.schedule(
                    t,
                    EventKind::WorkArrival,
                    EntityId::Source(source),
                    Payload::WorkArrival { source },
                )?;
            }
        }
        Ok(())
    }

    fn hop(&mut self, request: RequestId, stage: Stage, replica: Option<ReplicaId>, node: NodeId) {
        let at = self.k.now();
        let Some(req) = self.requests.get_mut(request.0 as usize) else { return };
        if req.add_hop(Hop { stage, replica, node, at }) {
            if let Some(r) = replica {
                self.k.record(EntityId::Request(request), Outcome::Stage { request, stage, replica: r });
            }
        }
    }

    fn finish_request(&mut self, id: RequestId, outcome: RequestOutcome) {
        let now = self.k.now();
        let timeout = self.s.params.request_timeout_us;
        let Some(req) = self.requests.get_mut(id.0 as usize) else { return };
        if req.outcome != RequestOutcome::Pending {
            return;
        }
        let latency_us = now - req.created_at;
        let outcome = if outcome == RequestOutcome::Completed && latency_us > timeout {
            RequestOutcome::Failed
        } else {
            outcome
        };
        req.outcome = outcome;
        req.finished_at = Some(now);
        self.k.record(
            EntityId::Request(id),
            Outcome::RequestDone {
                request: id,
                outcome,
                latency_us,
            },
        );
    }

    fn complete(&mut self, id: RequestId) {
        self.finish_request(id, RequestOutcome::Completed);
    }

    fn fail(&mut self, id: RequestId) {
        self.finish_request(id, RequestOutcome::Failed);
    }

    fn scan_error_queue(&mut self) {
        let len = self.bus.error_queue().len();
        while self.errors_seen < len {
            let (msg, _) = self.bus.error_queue()[self.errors_seen];
            self.errors_seen += 1;
            if let Some(r) = self.bus.message(msg).body.request {
                self.finish_request(r, RequestOutcome::ErrorQueued);
            }
        }
    }

    // ---- node work ------------------------------------------------------

    fn enqueue(&mut self, node: NodeId, replica: ReplicaId, work: Work) {
        let id = self.next_job;
        self.next_job += 1;
        let incarnation = self.orch.replica(replica).incarnation;
        self.jobs.insert(
            id,
            Job {
                replica,
                incarnation,
                work,
                cache: None,
            },
        );
        self.nodes[node.idx()].queue.push_back(id);
        self.pump(node);
    }

    fn job_live(&self, j: &Job) -> bool {
        let rep = self.orch.replica(j.replica);
        rep.incarnation == j.incarnation && rep.running() && !rep.faulty
    }

    fn pump(&mut self, node: NodeId) {
        let cap = self.topo.node(node).capacity;
        while self.nodes[node.idx()].busy < cap {
            let Some(id) = self.nodes[node.idx()].queue.pop_front() else { break };
            let Some(job) = self.jobs.get(&id).copied() else { continue };
            if !self.job_live(&job) {
                self.jobs.remove(&id);
                continue;
            }
            let duration = self.start_job(id, node, job);
            self.nodes[node.idx()].busy += 1;
            let epoch = self.nodes[node.idx()].epoch;
            self.k.sched.schedule_in(
                duration,
                EventKind::ProcessingDone,
                EntityId::Node(node),
                Payload::ProcessingDone { node, epoch, job: id },
            );
        }
    }

    fn processing(&mut self, replica: ReplicaId) -> u64 {
        let d = self.orch.spec(replica.service).processing.clone();
        self.k.rng.draw_us(SERVICE_TIMES_STREAM, &d).expect("service_times stream registered")
    }

    /// Samples the job's duration and records the stage it represents.
    fn start_job(&mut self, id: u64, node: NodeId, job: Job) -> u64 {
        let r = job.replica;
        let mut duration = self.processing(r);
        match job.work {
            Work::Ingest { request } => self.hop(request, Stage::ExternalApi, Some(r), node),
            Work::Consume { body, .. } => {
                let Some(request) = body.request else { return duration };
                let stage = match self.orch.spec(r.service).role {
                    Role::ExternalApi => Some(Stage::Response),
                    Role::ForexApi => Some(Stage::ForexApi),
                    Role::Auth => Some(Stage::Auth),
                    Role::Trading => Some(Stage::Trading),
                    Role::LineCheck => Some(Stage::LineCheck),
                    Role::Custom => Some(Stage::Custom),
                    _ => None,
                };
                if let Some(st) = stage {
                    self.hop(request, st, Some(r), node);
                }
                if self.orch.spec(r.service).role == Role::LineCheck {
                    let (extra, cache) = self.data_access(request, node);
                    duration += extra;
                    if let (Some(c), Some(j)) = (cache, self.jobs.get_mut(&id)) {
                        j.cache = Some(c);
                        self.reg.add_in_flight(c, 1);
                    }
                }
            }
            Work::Serve { call, .. } => {
                let request = call.request;
                let kind = self.requests[request.0 as usize].kind;
                self.hop(request, Stage::RequestService, Some(r), node);
                self.hop(request, Stage::LineCheck, Some(r), node);
                let mut stages = 2;
                if kind == RequestKind::Trade {
                    self.hop(request, Stage::ForexData, Some(r), node);
                    stages = 3;
                }
                let lat = self.mainframe.mainframe(&mut self.k.rng);
                self.hop(request, Stage::Mainframe, None, node);
                self.record_data(request, DataSource::Mainframe, lat);
                duration = duration * stages + lat;
            }
        }
        duration
    }

    fn record_data(&mut self, request: RequestId, source: DataSource, latency_us: u64) {
        self.requests[request.0 as usize].data_access_us += latency_us;
        self.k.record(
            EntityId::Request(request),
            Outcome::DataAccess {
                request,
                source,
                latency_us,
            },
        );
    }

    /// Cache lookup via discovery, falling back to the mainframe when no cache
    /// instance is reachable. Returns the added job time and the cache used.
    fn data_access(&mut self, request: RequestId, node: NodeId) -> (u64, Option<ReplicaId>) {
        let mut via: Option<(ReplicaId, u64)> = None;
        if let Some(cs) = self.roles.cache {
            if let Ok(c) = self.reg.resolve(&mut self.k, &self.topo, cs, node) {
                let cnode = self.orch.replica(c).node;
                if let Some(rtt) = self.topo.round_trip(&mut self.k, node, cnode) {
                    via = Some((c, rtt));
                }
            }
        }
        match via {
            Some((c, rtt)) => {
                let (source, lat) = self.mainframe.cached(&mut self.k.rng);
                let stage = match source {
                    DataSource::Cache => Stage::Cache,
                    DataSource::Mainframe => Stage::Mainframe,
                };
                self.hop(request, stage, Some(c), node);
                self.record_data(request, source, lat);
                (rtt + lat, Some(c))
            }
            None => {
                let lat = self.mainframe.mainframe(&mut self.k.rng);
                self.hop(request, Stage::Mainframe, None, node);
                self.record_data(request, DataSource::Mainframe, lat);
                (lat, None)
            }
        }
    }

    fn on_done(&mut self, node: NodeId, epoch: u32, id: u64) {
        if self.nodes[node.idx()].epoch != epoch {
            return;
        }
        self.nodes[node.idx()].busy -= 1;
        if let Some(job) = self.jobs.remove(&id) {
            if let Some(c) = job.cache {
                self.reg.add_in_flight(c, -1);
            }
            if self.job_live(&job) {
                self.complete_job(node, job);
            }
        }
        self.pump(node);
    }

    fn complete_job(&mut self, node: NodeId, job: Job) {
        let r = job.replica;
        *self.served.entry(r).or_default() += 1;
        match job.work {
            Work::Ingest { request } => {
                let kind = self.requests[request.0 as usize].kind;
                let stage = if self.s.preset == PresetKind::Monolith { Stage::ForexApi } else { Stage::Auth };
                let Some(ex) = self.ex.ingress else {
                    self.fail(request);
                    return;
                };
                let p = Publish {
                    exchange: ex,
                    routing_key: format!("request.{}", request_kind_key(kind)),
                    kind: payload_kind(kind),
                    body: Body {
                        request: Some(request),
                        stage,
                    },
                };
                if self.bus.send(&mut self.k, &mut self.topo, node, vec![p], None).is_err() {
                    self.fail(request);
                }
            }
            Work::Consume { delivery, body } => self.complete_consume(node, r, delivery, body),
            Work::Serve { call, caller_node } => {
                let _ = self.topo.deliver(
                    &mut self.k,
                    node,
                    caller_node,
                    Traffic::Reply,
                    EventKind::MessageDelivery,
                    EntityId::Replica(call.caller),
                    Payload::DirectReply {
                        from: node,
                        to: caller_node,
                        call,
                        refused: false,
                    },
                );
            }
        }
    }

    fn publish_for(&self, request: RequestId, exchange: Option<ExchangeId>, key: String, kind: PayloadKind, stage: Stage) -> Option<Publish> {
        Some(Publish {
            exchange: exchange?,
            routing_key: key,
            kind,
            body: Body {
                request: Some(request),
                stage,
            },
        })
    }

    fn complete_consume(&mut self, node: NodeId, r: ReplicaId, d: DeliveryRef, body: Body) {
        self.k.record(
            EntityId::Replica(r),
            Outcome::Processed {
                msg: d.msg,
                queue: d.queue,
                consumer: r,
                broadcast: d.broadcast,
            },
        );
        let spec = self.orch.spec(r.service);
        let role = spec.role;
        let forward = spec.forward.clone();
        if spec.behavior == Behavior::NeverAck {
            return;
        }
        let mut publishes = Vec::new();
        let mut done: Option<RequestId> = None;
        let mut call: Option<RequestId> = None;
        if let Some(req) = body.request {
            let kind = self.requests[req.0 as usize].kind;
            let key = request_kind_key(kind);
            match role {
                Role::Auth => {
                    let (k2, pk, st) = match kind {
                        RequestKind::Trade => ("trade.new", PayloadKind::TradeRequest, Stage::Trading),
                        RequestKind::LineCheck => ("linecheck.new", PayloadKind::LineCheckRequest, Stage::LineCheck),
                    };
                    publishes.extend(self.publish_for(req, self.ex.business, k2.into(), pk, st));
                }
                Role::Trading => {
                    publishes.extend(self.publish_for(
                        req,
                        self.ex.business,
                        "linecheck.trade".into(),
                        PayloadKind::LineCheckRequest,
                        Stage::LineCheck,
                    ));
                }
                Role::LineCheck => {
                    publishes.extend(self.publish_for(
                        req,
                        self.ex.responses,
                        format!("response.{key}"),
                        PayloadKind::Response,
                        Stage::Response,
                    ));
                }
                Role::ExternalApi => done = Some(req),
                Role::ForexApi => call = Some(req),
                Role::Custom => match forward {
                    Some(f) => match self.bus.exchange_id(&f.exchange) {
                        Some(ex) => publishes.push(Publish {
                            exchange: ex,
                            routing_key: f.routing_key.clone(),
                            kind: self.bus.message(d.msg).payload_kind,
                            body,
                        }),
                        None => self.fail(req),
                    },
                    None => done = Some(req),
                },
                _ => {}
            }
        }
        let ack = (!d.broadcast).then_some(AckRef {
            msg: d.msg,
            consumer: r,
            attempt: d.attempt,
        });
        if !publishes.is_empty() || ack.is_some() {
            // an unreachable broker leaves the message unacked; it will be redelivered
            let _ = self.bus.send(&mut self.k, &mut self.topo, node, publishes, ack);
        }
        if let Some(req) = done {
            self.complete(req);
        }
        if let Some(req) = call {
            self.call_back(r, node, req, 0);
        }
    }

    // ---- direct calls ---------------------------------------------------

    fn call_back(&mut self, caller: ReplicaId, node: NodeId, request: RequestId, attempt: u8) {
        let Some(target) = self.refs.get(&caller).and_then(|t| t.current()) else {
            self.fail(request);
            return;
        };
        let call = CallRef {
            request,
            caller,
            callee: target,
            attempt,
        };
        self.k.record(
            EntityId::Replica(caller),
            Outcome::DirectCall {
                request,
                caller,
                callee: target,
            },
        );
        let to = self.orch.replica(target).node;
        let sent = self.topo.deliver(
            &mut self.k,
            node,
            to,
            Traffic::DirectCall,
            EventKind::MessageDelivery,
            EntityId::Replica(target),
            Payload::DirectCall { from: node, to, call },
        );
        if !matches!(sent, Ok(crate::topology::Delivery::Scheduled { .. })) {
            self.on_refused(node, call);
        }
    }

    fn on_call(&mut self, from: NodeId, to: NodeId, call: CallRef) {
        if !self.topo.arrival_ok(&mut self.k, from, to, Traffic::DirectCall) {
            return;
        }
        let rep = self.orch.replica(call.callee);
        if rep.state == ReplicaState::Active && rep.responsive() && rep.node == to {
            self.enqueue(to, call.callee, Work::Serve { call, caller_node: from });
        } else {
            let _ = self.topo.deliver(
                &mut self.k,
                to,
                from,
                Traffic::Reply,
                EventKind::MessageDelivery,
                EntityId::Replica(call.caller),
                Payload::DirectReply {
                    from: to,
                    to: from,
                    call,
                    refused: true,
                },
            );
        }
    }

    fn on_reply(&mut self, from: NodeId, to: NodeId, call: CallRef, refused: bool) {
        if !self.topo.arrival_ok(&mut self.k, from, to, Traffic::Reply) {
            return;
        }
        let caller = self.orch.replica(call.caller);
        if !caller.running() || caller.faulty || caller.node != to {
            return;
        }
        if refused {
            self.on_refused(to, call);
            return;
        }
        let kind = self.requests[call.request.0 as usize].kind;
        let p = self.publish_for(
            call.request,
            self.ex.responses,
            format!("response.{}", request_kind_key(kind)),
            PayloadKind::Response,
            Stage::Response,
        );
        match p {
            Some(p) => {
                let _ = self.bus.send(&mut self.k, &mut self.topo, to, vec![p], None);
            }
            None => self.fail(call.request),
        }
    }

    /// A refused call moves the caller's reference forward for good, then
    /// retries once.
    fn on_refused(&mut self, node: NodeId, call: CallRef) {
        self.k.record(
            EntityId::Replica(call.caller),
            Outcome::CallRefused {
                caller: call.caller,
                callee: call.callee,
            },
        );
        let next = match self.refs.get_mut(&call.caller) {
            Some(t) if t.current() == Some(call.callee) => {
                let next = t.advance();
                if let Some(to) = next {
                    let index = t.index as u32;
                    self.k.record(
                        EntityId::Replica(call.caller),
                        Outcome::RefAdvanced {
                            caller: call.caller,
                            to,
                            index,
                        },
                    );
                }
                next
            }
            Some(t) => t.current(),
            None => None,
        };
        if call.attempt == 0 && next.is_some() {
            self.call_back(call.caller, node, call.request, 1);
        } else {
            self.fail(call.request);
        }
    }

    // ---- bus deliveries -------------------------------------------------

    fn on_delivery(&mut self, from: NodeId, to: NodeId, d: DeliveryRef) {
        if !self.topo.arrival_ok(&mut self.k, from, to, Traffic::Delivery) {
            return;
        }
        let rep = self.orch.replica(d.consumer);
        let accepting = rep.responsive()
            && rep.node == to
            && matches!(rep.state, ReplicaState::Active | ReplicaState::Draining);
        if !accepting {
            self.k.record(
                EntityId::Replica(d.consumer),
                Outcome::Lost {
                    msg: d.msg,
                    consumer: d.consumer,
                },
            );
            return;
        }
        let body = self.bus.message(d.msg).body;
        self.enqueue(to, d.consumer, Work::Consume { delivery: d, body });
    }

    // ---- membership and serving ----------------------------------------

    fn refresh_members(&mut self) {
        let members: Vec<NodeId> = match self.roles.broker {
            Some(b) => {
                let mut m: Vec<NodeId> = self
                    .orch
                    .of_service(b)
                    .filter(|r| matches!(r.state, ReplicaState::Active | ReplicaState::Draining))
                    .map(|r| r.node)
                    .collect();
                m.sort();
                m.dedup();
                m
            }
            None => self.topo.nodes().iter().map(|n| n.id).collect(),
        };
        self.bus.set_members(members);
        self.bus.ensure_sides(&self.topo);
    }

    /// Whether a settled replica should consume and be resolvable.
    fn should_serve(&self, r: ReplicaId) -> bool {
        let rep = self.orch.replica(r);
        if rep.state != ReplicaState::Active || !rep.responsive() {
            return false;
        }
        !self.orch.is_ap(r.service) || self.orch.lease_holder(r.service) == Some(r)
    }

    fn activate(&mut self, r: ReplicaId) {
        let node = self.orch.replica(r).node;
        let queues: Vec<_> = self
            .orch
            .spec(r.service)
            .consumes
            .iter()
            .filter_map(|q| self.bus.queue_id(q))
            .collect();
        for q in queues {
            self.bus.subscribe(&mut self.k, &mut self.topo, q, r, node);
        }
        self.reg.set_serving(r, true);
    }

    fn deactivate(&mut self, r: ReplicaId) {
        self.bus.unsubscribe(r);
        self.reg.set_serving(r, false);
    }

    // ---- health and failover -------------------------------------------

    fn on_probe(&mut self) {
        let orch = &self.orch;
        let transitions = self.reg.probe_tick(&mut self.k, &self.topo, |r| orch.replica(r).responsive());
        for t in transitions.into_iter().filter(|t| t.own_view) {
            self.on_health(t);
        }
        let interval = self.s.params.probe.interval_us;
        if self.k.now() + interval <= self.s.horizon {
            self.k
                .sched
                .schedule_in(interval, EventKind::HealthProbe, EntityId::Registry, Payload::HealthProbe);
        }
    }

    fn on_health(&mut self, t: Transition) {
        let r = t.replica;
        let rep = self.orch.replica(r).clone();
        if rep.retired {
            return;
        }
        match t.to {
            Health::Healthy => {
                if self.should_serve(r) {
                    self.activate(r);
                } else if rep.state == ReplicaState::Passive
                    && self.orch.lease_holder(r.service).is_none()
                    && !self.orch.pending_takeover.contains_key(&r.service)
                {
                    self.schedule_takeover(r.service);
                }
            }
            Health::Unhealthy => {
                if !rep.responsive() && !rep.failure_handled {
                    self.handle_failure(r);
                }
            }
            Health::Suspect => {}
        }
    }

    /// Reaction to a detected failure: stop routing to the replica, move the
    /// lease, and schedule a restart when the architecture restarts on its own.
    fn handle_failure(&mut self, r: ReplicaId) {
        self.orch.replica_mut(r).failure_handled = true;
        self.deactivate(r);
        let _ = self.reg.deregister(r);
        if self.orch.is_ap(r.service) && self.orch.lease_holder(r.service) == Some(r) {
            self.orch.release_lease(&mut self.k, r.service);
            self.schedule_takeover(r.service);
        }
        let rep = self.orch.replica(r);
        if self.orch.auto_restart && rep.state == ReplicaState::Failed && !rep.faulty && !rep.surge {
            self.schedule_restart(r);
        }
    }

    fn schedule_restart(&mut self, r: ReplicaId) {
        self.k.record(EntityId::Replica(r), Outcome::RestartScheduled { replica: r });
        self.k.sched.schedule_in(
            self.orch.timings.restart_delay_us,
            EventKind::UpdateStep,
            EntityId::Replica(r),
            Payload::Lifecycle(Lifecycle::Restart { replica: r }),
        );
    }

    fn schedule_takeover(&mut self, s: ServiceId) {
        if self.orch.pending_takeover.contains_key(&s) {
            return;
        }
        let cand = self
            .orch
            .of_service(s)
            .find(|x| x.state == ReplicaState::Passive && x.responsive() && self.reg.is_healthy(x.id, &self.topo))
            .map(|x| x.id);
        let Some(c) = cand else { return };
        self.orch.pending_takeover.insert(s, c);
        self.k.record(EntityId::Orchestrator, Outcome::TakeoverScheduled { replica: c });
        self.k.sched.schedule_in(
            self.orch.timings.takeover_delay_us,
            EventKind::TakeoverTimer,
            EntityId::Service(s),
            Payload::Takeover {
                service: s,
                candidate: c,
            },
        );
    }

    fn on_takeover(&mut self, s: ServiceId, c: ReplicaId) {
        self.orch.pending_takeover.remove(&s);
        let rep = self.orch.replica(c);
        let usable = rep.state == ReplicaState::Passive && rep.responsive() && self.reg.is_healthy(c, &self.topo);
        if self.orch.lease_holder(s).is_some() || !usable {
            self.k.record(EntityId::Orchestrator, Outcome::TakeoverAbandoned { replica: c });
            if self.orch.lease_holder(s).is_none() {
                self.schedule_takeover(s);
            }
            return;
        }
        self.orch.grant_lease(&mut self.k, c);
        self.activate(c);
    }

    // ---- lifecycle ------------------------------------------------------

    /// Stops whatever `r` was doing and boots it on `node` at `version`.
    /// `Started` fires after the startup time plus `extra_us`.
    fn start_replica(&mut self, r: ReplicaId, node: NodeId, version: u32, faulty: bool, extra_us: u64) {
        let node = if self.topo.is_up(node) {
            Some(node)
        } else {
            self.orch.restart_node(&self.topo, r)
        };
        self.deactivate(r);
        let _ = self.reg.deregister(r);
        if self.orch.is_ap(r.service) && self.orch.lease_holder(r.service) == Some(r) {
            self.orch.release_lease(&mut self.k, r.service);
            self.schedule_takeover(r.service);
        }
        let Some(node) = node else {
            if self.orch.replica(r).running() {
                self.orch.fail_replica(&mut self.k, r);
            }
            self.orch.replica_mut(r).failure_handled = true;
            if self.orch.auto_restart {
                self.schedule_restart(r);
            }
            return;
        };
        {
            let rep = self.orch.replica_mut(r);
            rep.node = node;
            rep.version = version;
            rep.faulty = faulty;
            rep.incarnation += 1;
            rep.failure_handled = true;
        }
        self.orch.set_state(&mut self.k, r, ReplicaState::Starting);
        self.refresh_members();
        let incarnation = self.orch.replica(r).incarnation;
        self.k.sched.schedule_in(
            self.orch.timings.startup_us + extra_us,
            EventKind::UpdateStep,
            EntityId::Replica(r),
            Payload::Lifecycle(Lifecycle::Started { replica: r, incarnation }),
        );
    }

    fn on_restart(&mut self, r: ReplicaId) {
        let rep = self.orch.replica(r);
        if rep.state != ReplicaState::Failed || rep.retired {
            return;
        }
        let version = rep.version;
        match self.orch.restart_node(&self.topo, r) {
            Some(node) => self.start_replica(r, node, version, false, 0),
            None => self.schedule_restart(r),
        }
    }

    fn on_started(&mut self, r: ReplicaId, incarnation: u32) {
        let rep = self.orch.replica(r);
        if rep.incarnation != incarnation || rep.state != ReplicaState::Starting {
            return;
        }
        let node = rep.node;
        let to = if self.orch.is_ap(r.service) {
            ReplicaState::Passive
        } else {
            ReplicaState::Active
        };
        self.orch.set_state(&mut self.k, r, to);
        let _ = self.reg.register(r, node, Health::Suspect, false);
        self.refresh_members();
    }

    // ---- faults ---------------------------------------------------------

    fn node_id(&self, name: &str) -> Result<NodeId, SimError> {
        self.k.trace.names().node_id(name).ok_or_else(|| SimError::UnknownNode(name.into()))
    }

    fn service_id(&self, name: &str) -> Result<ServiceId, SimError> {
        self.k
            .trace
            .names()
            .service_id(name)
            .ok_or_else(|| SimError::UnknownService(name.into()))
    }

    fn on_fault(&mut self, index: u32) -> Result<(), RunError> {
        self.k.record(EntityId::Orchestrator, Outcome::Fault { index });
        let action = self.s.faults[index as usize].action.clone();
        match action {
            FaultAction::KillNode { node } => {
                let n = self.node_id(&node)?;
                if !self.topo.set_node_status(n, NodeStatus::Down)? {
                    self.k.record(EntityId::Node(n), Outcome::NodeUnchanged { node: n });
                    return Ok(());
                }
                self.k.record(EntityId::Node(n), Outcome::NodeDown { node: n });
                let work = &mut self.nodes[n.idx()];
                work.epoch += 1;
                work.busy = 0;
                for id in std::mem::take(&mut work.queue) {
                    self.jobs.remove(&id);
                }
                self.drop_running_jobs(n);
                self.orch.fail_node(&mut self.k, n);
                self.refresh_members();
            }
            FaultAction::RestoreNode { node } => {
                let n = self.node_id(&node)?;
                if !self.topo.set_node_status(n, NodeStatus::Up)? {
                    self.k.record(EntityId::Node(n), Outcome::NodeUnchanged { node: n });
                    return Ok(());
                }
                self.k.record(EntityId::Node(n), Outcome::NodeUp { node: n });
                self.refresh_members();
                if self.orch.auto_restart {
                    self.rebalance();
                } else {
                    // components come back one after another in declaration order
                    let back: Vec<(ReplicaId, u32)> = self
                        .orch
                        .all()
                        .filter(|r| r.node == n && r.state == ReplicaState::Failed)
                        .map(|r| (r.id, r.version))
                        .collect();
                    let step = self.orch.timings.startup_us;
                    for (k, (r, version)) in back.into_iter().enumerate() {
                        self.start_replica(r, n, version, false, k as u64 * step);
                    }
                }
            }
            FaultAction::KillReplica { service, index } => {
                let s = self.service_id(&service)?;
                let r = ReplicaId::new(s, index);
                if self.orch.replicas[s.idx()].len() > index as usize && self.orch.replica(r).running() {
                    self.orch.fail_replica(&mut self.k, r);
                    self.refresh_members();
                }
            }
            FaultAction::Partition { groups } => {
                let ids = groups
                    .iter()
                    .map(|g| g.iter().map(|n| self.node_id(n)).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?;
                self.topo.apply_partition(&ids)?;
                self.bus.on_partition(&mut self.k, &mut self.topo);
                self.reg.on_partition(&self.topo);
            }
            FaultAction::Heal => {
                self.reg.merge_views(&self.topo);
                self.topo.heal();
                self.k.record(EntityId::Topology, Outcome::Healed);
                self.bus.on_heal(&mut self.k, &mut self.topo);
            }
            FaultAction::RollingUpdate { service, version, faulty } => {
                let s = self.service_id(&service)?;
                self.start_update(s, version, faulty);
            }
        }
        Ok(())
    }

    /// Jobs running on a dead node never finish: their slots are gone with
    /// the epoch, so just forget them.
    fn drop_running_jobs(&mut self, n: NodeId) {
        let dead: Vec<u64> = self
            .jobs
            .iter()
            .filter(|(_, j)| self.orch.replica(j.replica).node == n)
            .map(|(&id, _)| id)
            .collect();
        for id in dead {
            if let Some(j) = self.jobs.remove(&id) {
                if let Some(c) = j.cache {
                    self.reg.add_in_flight(c, -1);
                }
            }
        }
    }

    fn rebalance(&mut self) {
        for (r, to) in self.orch.plan_rebalance(&self.topo) {
            let from = self.orch.replica(r).node;
            self.k.record(EntityId::Orchestrator, Outcome::Migration { replica: r, from, to });
            self.drain(r);
            self.orch.migrations.insert(
                r,
                Migration {
                    replica: r,
                    to,
                    started: false,
                },
            );
            self.schedule_migration_poll(r);
        }
    }

    fn schedule_migration_poll(&mut self, r: ReplicaId) {
        self.k.sched.schedule_in(
            self.orch.timings.poll_us,
            EventKind::UpdateStep,
            EntityId::Replica(r),
            Payload::Lifecycle(Lifecycle::MigrationPoll { replica: r }),
        );
    }

    fn drive_migration(&mut self, r: ReplicaId) {
        let Some(m) = self.orch.migrations.get(&r).copied() else { return };
        let rep = self.orch.replica(r).clone();
        if !m.started {
            if rep.state == ReplicaState::Failed {
                self.orch.migrations.remove(&r);
                return;
            }
            if self.drained(r) {
                self.start_replica(r, m.to, rep.version, false, 0);
                if let Some(m) = self.orch.migrations.get_mut(&r) {
                    m.started = true;
                }
            }
            self.schedule_migration_poll(r);
            return;
        }
        let settled = matches!(rep.state, ReplicaState::Active | ReplicaState::Passive) && self.reg.is_healthy(r, &self.topo);
        if settled || rep.state == ReplicaState::Failed {
            self.orch.migrations.remove(&r);
        } else {
            self.schedule_migration_poll(r);
        }
    }

    // ---- rolling updates -------------------------------------------------

    fn drained(&self, r: ReplicaId) -> bool {
        self.bus.unacked_for(r) == 0 && !self.jobs.values().any(|j| j.replica == r && self.job_live(j))
    }

    /// Stops new work reaching `r` while it finishes what it holds.
    fn drain(&mut self, r: ReplicaId) {
        self.orch.set_state(&mut self.k, r, ReplicaState::Draining);
        self.deactivate(r);
        if self.orch.is_ap(r.service) && self.orch.lease_holder(r.service) == Some(r) {
            self.orch.release_lease(&mut self.k, r.service);
        }
        self.refresh_members();
    }

    fn retire(&mut self, r: ReplicaId) {
        self.deactivate(r);
        let _ = self.reg.deregister(r);
        if self.orch.is_ap(r.service) && self.orch.lease_holder(r.service) == Some(r) {
            self.orch.release_lease(&mut self.k, r.service);
            self.schedule_takeover(r.service);
        }
        if self.orch.replica(r).running() {
            self.orch.fail_replica(&mut self.k, r);
        }
        let rep = self.orch.replica_mut(r);
        rep.retired = true;
        rep.failure_handled = true;
        self.refresh_members();
    }

    fn start_update(&mut self, s: ServiceId, version: u32, faulty: bool) {
        if self.orch.updates.contains_key(&s) {
            self.k.record(EntityId::Service(s), Outcome::Note("update-already-running"));
            return;
        }
        let old_version = self.orch.spec(s).version;
        self.k.record(EntityId::Service(s), Outcome::UpdateStarted { service: s, version });
        let holder = self.orch.lease_holder(s);
        let mut remaining: Vec<u32> = self
            .orch
            .of_service(s)
            .filter(|r| Some(r.id) != holder)
            .map(|r| r.id.index)
            .collect();
        remaining.extend(holder.map(|h| h.index));
        let mut u = RollingUpdate {
            service: s,
            version,
            old_version,
            faulty,
            remaining,
            phase: None,
        };
        if self.orch.of_service(s).count() == 1 {
            // a lone replica gets a temporary sibling so the service never goes dark
            let taken: Vec<NodeId> = self.orch.of_service(s).map(|r| r.node).collect();
            let load = self.orch.load();
            let node = best_node(&self.topo, &taken, &load, None).unwrap_or(taken[0]);
            let id = ReplicaId::new(s, self.orch.replicas[s.idx()].len() as u32);
            self.orch.replicas[s.idx()].push(Replica {
                id,
                node,
                state: ReplicaState::Failed,
                version: old_version,
                incarnation: 0,
                faulty: false,
                surge: true,
                retired: false,
                failure_handled: true,
            });
            self.start_replica(id, node, version, faulty, 0);
            u.phase = Some(UpdatePhase::Surge {
                replica: id,
                since: self.k.now(),
            });
        }
        self.orch.updates.insert(s, u);
        self.schedule_update_poll(s);
    }

    fn schedule_update_poll(&mut self, s: ServiceId) {
        self.k.sched.schedule_in(
            self.orch.timings.poll_us,
            EventKind::UpdateStep,
            EntityId::Service(s),
            Payload::Lifecycle(Lifecycle::UpdatePoll { service: s }),
        );
    }

    fn settled_healthy(&self, r: ReplicaId) -> bool {
        let rep = self.orch.replica(r);
        matches!(rep.state, ReplicaState::Active | ReplicaState::Passive) && self.reg.is_healthy(r, &self.topo)
    }

    fn drive_update(&mut self, s: ServiceId) {
        let Some(mut u) = self.orch.updates.remove(&s) else { return };
        let now = self.k.now();
        let timeout = self.orch.timings.update_health_timeout_us;
        let step = loop {
            match u.phase {
                None => {
                    if !u.remaining.is_empty() {
                        let r = ReplicaId::new(s, u.remaining.remove(0));
                        let rep = self.orch.replica(r).clone();
                        if !rep.running() {
                            self.start_replica(r, rep.node, u.version, u.faulty, 0);
                            u.phase = Some(UpdatePhase::Starting { replica: r, since: now });
                            continue;
                        }
                        let holder = self.orch.lease_holder(s) == Some(r);
                        self.drain(r);
                        if holder {
                            let cand = self
                                .orch
                                .of_service(s)
                                .find(|x| {
                                    x.state == ReplicaState::Passive && x.version == u.version && self.settled_healthy(x.id)
                                })
                                .map(|x| x.id);
                            match cand {
                                Some(c) => {
                                    self.orch.grant_lease(&mut self.k, c);
                                    self.activate(c);
                                }
                                None => self.schedule_takeover(s),
                            }
                        }
                        u.phase = Some(UpdatePhase::Draining { replica: r });
                        continue;
                    }
                    let surge = self.orch.of_service(s).find(|r| r.surge).map(|r| r.id);
                    if let Some(sg) = surge {
                        if self.orch.lease_holder(s) == Some(sg) {
                            // hand the lease back to an updated regular replica first
                            let cand = self
                                .orch
                                .of_service(s)
                                .find(|x| !x.surge && x.state == ReplicaState::Passive && self.settled_healthy(x.id))
                                .map(|x| x.id);
                            self.drain(sg);
                            if let Some(c) = cand {
                                self.orch.grant_lease(&mut self.k, c);
                                self.activate(c);
                            } else {
                                self.schedule_takeover(s);
                            }
                        } else {
                            self.drain(sg);
                        }
                        u.phase = Some(UpdatePhase::Retiring { replica: sg });
                        continue;
                    }
                    break Step::Completed;
                }
                Some(UpdatePhase::Draining { replica }) => {
                    if self.drained(replica) {
                        let node = self.orch.replica(replica).node;
                        self.start_replica(replica, node, u.version, u.faulty, 0);
                        u.phase = Some(UpdatePhase::Starting { replica, since: now });
                        continue;
                    }
                    break Step::Wait;
                }
                Some(UpdatePhase::Starting { replica, since }) | Some(UpdatePhase::Surge { replica, since }) => {
                    if self.settled_healthy(replica) {
                        u.phase = None;
                        continue;
                    }
                    if now - since >= timeout {
                        break Step::Abort(replica);
                    }
                    break Step::Wait;
                }
                Some(UpdatePhase::Handover { .. }) => {
                    u.phase = None;
                    continue;
                }
                Some(UpdatePhase::Retiring { replica }) => {
                    if self.drained(replica) {
                        self.retire(replica);
                        u.phase = None;
                        continue;
                    }
                    break Step::Wait;
                }
            }
        };
        match step {
            Step::Wait => {
                self.orch.updates.insert(s, u);
                self.schedule_update_poll(s);
            }
            Step::Completed => {
                self.orch.specs[s.idx()].version = u.version;
                self.k.record(EntityId::Service(s), Outcome::UpdateCompleted { service: s, version: u.version });
            }
            Step::Abort(r) => {
                self.k.record(EntityId::Service(s), Outcome::UpdateAborted { service: s, version: u.version });
                if self.orch.replica(r).surge {
                    self.retire(r);
                } else {
                    let node = self.orch.replica(r).node;
                    self.start_replica(r, node, u.old_version, false, 0);
                    let surge: Vec<ReplicaId> = self.orch.of_service(s).filter(|x| x.surge).map(|x| x.id).collect();
                    for sg in surge {
                        self.retire(sg);
                    }
                }
            }
        }
    }

    // ---- wrap-up --------------------------------------------------------

    fn finish(mut self) -> Result<RunOutput, RunError> {
        self.k.set_current_kind(EventKind::WorkArrival);
        let horizon = self.s.horizon;
        let timeout = self.s.params.request_timeout_us;
        let stale: Vec<RequestId> = self
            .requests
            .iter()
            .filter(|r| r.outcome == RequestOutcome::Pending && r.created_at + timeout <= horizon)
            .map(|r| r.id)
            .collect();
        for id in stale {
            self.fail(id);
        }
        self.bus.check_invariants().map_err(|message| RunError::Invariant {
            time: horizon,
            message,
        })?;
        let report = self.report();
        Ok(RunOutput {
            report,
            trace: self.k.trace,
            requests: self.requests,
            broker: self.bus,
            orchestrator: self.orch,
            refs: self.refs,
            served: self.served,
        })
    }

    fn on_path(&self, s: ServiceId) -> bool {
        let spec = self.orch.spec(s);
        match spec.role {
            Role::ExternalApi | Role::ForexApi | Role::RequestService | Role::Auth | Role::Trading | Role::LineCheck => true,
            Role::Broker => true,
            Role::Custom => !spec.consumes.is_empty(),
            _ => false,
        }
    }

    fn report(&self) -> MetricsReport {
        let s = self.s;
        let horizon = s.horizon;
        let trace = &self.k.trace;
        let stats = RequestStats::of(&self.requests);
        let mut services = Vec::new();
        let mut availability = 1.0f64;
        for sid in self.orch.service_ids() {
            let spec = self.orch.spec(sid);
            let seen: Vec<&Request> = self
                .requests
                .iter()
                .filter(|r| r.hops.iter().any(|h| h.replica.is_some_and(|x| x.service == sid)))
                .collect();
            let count = |o: RequestOutcome| seen.iter().filter(|r| r.outcome == o).count() as u64;
            let avail = metrics::availability(trace, sid, horizon);
            if self.on_path(sid) {
                availability = availability.min(avail);
            }
            let instances: Vec<InstanceReport> = self.orch.replicas[sid.idx()]
                .iter()
                .map(|r| InstanceReport {
                    replica: trace.names().replica(r.id),
                    served: self.served.get(&r.id).copied().unwrap_or(0),
                })
                .collect();
            services.push(ServiceReport {
                name: spec.name.clone(),
                requests_seen: seen.len() as u64,
                requests_completed: count(RequestOutcome::Completed),
                requests_failed: count(RequestOutcome::Failed),
                requests_error_queued: count(RequestOutcome::ErrorQueued),
                availability: avail,
                served: instances.iter().map(|i| i.served).sum(),
                instances,
            });
        }
        let lat = &stats.latencies;
        let mean = |total: f64| if stats.completed == 0 { 0.0 } else { total / stats.completed as f64 };
        let counters = self.topo.counters();
        let probe = &s.params.probe;
        MetricsReport {
            scenario: s.name.clone(),
            preset: s.preset.as_str().to_string(),
            seed: s.seed,
            horizon_us: horizon.as_micros(),
            events: self.k.sched.fired(),
            requests_generated: stats.generated,
            requests_completed: stats.completed,
            requests_failed: stats.failed,
            requests_error_queued: stats.error_queued,
            requests_pending: stats.pending,
            throughput_per_s: stats.completed as f64 / horizon.as_secs_f64(),
            latency_mean_us: mean(lat.iter().sum::<u64>() as f64),
            latency_p50_us: metrics::percentile(lat, 50.0),
            latency_p95_us: metrics::percentile(lat, 95.0),
            latency_p99_us: metrics::percentile(lat, 99.0),
            data_access_mean_us: mean(stats.data_access_total as f64),
            availability,
            availability_requests: stats.success_rate(),
            detection_window_us: probe.interval_us * probe.failure_threshold as u64 + self.orch.timings.takeover_delay_us,
            duplicate_deliveries: metrics::duplicate_count(trace),
            error_queue_depth: self.bus.error_queue().len() as u64,
            messages: counters.messages,
            cross_dc_messages: counters.cross_dc_messages,
            services,
            workload: serde_json::to_value(&s.file.workload).unwrap_or_default(),
            faults: serde_json::to_value(&s.file.faults).unwrap_or_default(),
            params: serde_json::to_value(&s.file.params).unwrap_or_default(),
        }
    }
}
