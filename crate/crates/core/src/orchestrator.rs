//! Replica lifecycle: service specs, placement across datacenters, the
//! replica table, active/passive leases, and the state kept for rolling
//! updates and migrations. The engine applies the side effects (bus
//! subscriptions, registry entries, node work) that these decisions imply.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::discovery::Policy;
use crate::error::SimError;
use crate::ids::{DcId, EntityId, NodeId, ReplicaId, ServiceId};
use crate::sim_core::{Dist, Kernel, Outcome, SimTime};
use crate::topology::Topology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Business,
    Foundation,
    Infrastructure,
    ExternalApi,
    MonolithComponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failover {
    ActiveActive,
    ActivePassive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Spread,
    OnePerDatacenter,
}

/// What a service does with the work it receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Entry point for provider requests; consumes responses.
    ExternalApi,
    /// Monolith front component: translates, then calls RequestService.
    ForexApi,
    /// Monolith back component serving direct calls.
    RequestService,
    Auth,
    Trading,
    LineCheck,
    /// Idle business service.
    Responsibility,
    /// Background consumer (logging, push, tracing and so on).
    Sink,
    /// Broker member host.
    Broker,
    /// Resolvable cache host.
    Cache,
    /// User-declared consumer; forwards or completes.
    Custom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Normal,
    /// Processes deliveries but never acknowledges them.
    NeverAck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forward {
    pub exchange: String,
    pub routing_key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub kind: ServiceKind,
    pub failover: Failover,
    pub replicas: u32,
    pub placement: Placement,
    pub processing: Dist,
    pub version: u32,
    pub role: Role,
    /// Queues consumed while serving.
    pub consumes: Vec<String>,
    pub forward: Option<Forward>,
    pub behavior: Behavior,
    pub policy: Policy,
    /// Explicit node per replica; overrides the placement rule.
    pub pinned_nodes: Vec<String>,
}

impl ServiceSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.replicas == 0 {
            p.push(format!("service `{}` needs at least one replica", self.name));
        }
        if self.kind == ServiceKind::Infrastructure && self.placement != Placement::OnePerDatacenter {
            p.push(format!("infrastructure service `{}` must use one_per_datacenter placement", self.name));
        }
        if self.kind == ServiceKind::ExternalApi && self.failover != Failover::ActivePassive {
            p.push(format!("external API `{}` must be active_passive", self.name));
        }
        if !self.processing.is_well_formed() {
            p.push(format!("service `{}` has a malformed processing time", self.name));
        }
        if !self.pinned_nodes.is_empty() && self.pinned_nodes.len() != self.replicas as usize {
            p.push(format!(
                "service `{}` pins {} nodes for {} replicas",
                self.name,
                self.pinned_nodes.len(),
                self.replicas
            ));
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicaState {
    Starting,
    Active,
    Passive,
    Draining,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replica {
    pub id: ReplicaId,
    pub node: NodeId,
    pub state: ReplicaState,
    pub version: u32,
    /// Bumped on every (re)start; stale lifecycle events carry an old value.
    pub incarnation: u32,
    /// A faulty build never answers health probes.
    pub faulty: bool,
    /// Extra replica used for start-new-first handover; removed afterwards.
    pub surge: bool,
    pub retired: bool,
    /// The failure has been detected and handled.
    pub failure_handled: bool,
}

impl Replica {
    /// Whether the process runs and answers probes.
    pub fn responsive(&self) -> bool {
        !self.faulty
            && matches!(
                self.state,
                ReplicaState::Active | ReplicaState::Passive | ReplicaState::Draining
            )
    }

    /// Whether the process runs at all.
    pub fn running(&self) -> bool {
        !matches!(self.state, ReplicaState::Failed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailoverTimings {
    pub takeover_delay_us: u64,
    pub restart_delay_us: u64,
    pub startup_us: u64,
    /// A new replica not Healthy this long after starting aborts an update.
    pub update_health_timeout_us: u64,
    pub poll_us: u64,
}

impl Default for FailoverTimings {
    fn default() -> Self {
        FailoverTimings {
            takeover_delay_us: 2_000_000,
            restart_delay_us: 10_000_000,
            startup_us: 1_000_000,
            update_health_timeout_us: 5_000_000,
            poll_us: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdatePhase {
    /// Waiting for a surge replica to become Healthy.
    Surge { replica: ReplicaId, since: SimTime },
    Draining { replica: ReplicaId },
    Starting { replica: ReplicaId, since: SimTime },
    /// Handing the lease of an active/passive service to an updated standby.
    Handover { from: ReplicaId },
    /// Removing the surge replica once all regular ones are updated.
    Retiring { replica: ReplicaId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RollingUpdate {
    pub service: ServiceId,
    pub version: u32,
    pub old_version: u32,
    pub faulty: bool,
    pub remaining: Vec<u32>,
    pub phase: Option<UpdatePhase>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Migration {
    pub replica: ReplicaId,
    pub to: NodeId,
    pub started: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Orchestrator {
    pub specs: Vec<ServiceSpec>,
    pub replicas: Vec<Vec<Replica>>,
    /// Lease holder per active/passive service.
    pub leases: BTreeMap<ServiceId, ReplicaId>,
    pub pending_takeover: BTreeMap<ServiceId, ReplicaId>,
    pub updates: BTreeMap<ServiceId, RollingUpdate>,
    pub migrations: BTreeMap<ReplicaId, Migration>,
    pub timings: FailoverTimings,
    pub auto_restart: bool,
}

/// Datacenters with at least one Up node, in declaration order.
fn live_dcs(topo: &Topology) -> Vec<DcId> {
    topo.datacenters()
        .iter()
        .filter(|d| d.nodes.iter().any(|&n| topo.is_up(n)))
        .map(|d| d.id)
        .collect()
}

/// Chooses the node for one more replica of a service whose replicas are
/// already on `taken`. Preference: a node without this service, then the
/// datacenter with the fewest of its replicas, then the node with the
/// fewest replicas overall, then declaration order.
pub fn best_node(topo: &Topology, taken: &[NodeId], load: &BTreeMap<NodeId, u32>, only_dc: Option<DcId>) -> Option<NodeId> {
    topo.up_nodes()
        .filter(|&n| only_dc.is_none_or(|d| topo.dc_of(n) == d))
        .min_by_key(|&n| {
            let same_node = taken.iter().filter(|&&t| t == n).count();
            let same_dc = taken.iter().filter(|&&t| topo.dc_of(t) == topo.dc_of(n)).count();
            let total = load.get(&n).copied().unwrap_or(0);
            (same_node, same_dc, total, n)
        })
}

/// Initial placement for one service. `load` counts replicas per node across
/// services placed so far and is updated in place.
pub fn place(spec: &ServiceSpec, topo: &Topology, load: &mut BTreeMap<NodeId, u32>) -> Result<Vec<NodeId>, SimError> {
    if !spec.pinned_nodes.is_empty() {
        let mut out = Vec::new();
        for name in &spec.pinned_nodes {
            let n = topo
                .nodes()
                .iter()
                .find(|n| &n.name == name)
                .ok_or_else(|| SimError::UnknownNode(name.clone()))?;
            out.push(n.id);
            *load.entry(n.id).or_default() += 1;
        }
        return Ok(out);
    }
    let up = topo.up_nodes().count();
    if up == 0 {
        return Err(SimError::InsufficientNodes {
            service: spec.name.clone(),
            needed: 1,
            available: 0,
        });
    }
    let mut out: Vec<NodeId> = Vec::new();
    if spec.placement == Placement::OnePerDatacenter {
        let dcs = live_dcs(topo);
        for dc in dcs {
            let n = best_node(topo, &out, load, Some(dc)).expect("live datacenter has an up node");
            out.push(n);
            *load.entry(n).or_default() += 1;
        }
    }
    while out.len() < spec.replicas as usize {
        let n = best_node(topo, &out, load, None).expect("at least one up node");
        out.push(n);
        *load.entry(n).or_default() += 1;
    }
    Ok(out)
}

impl Orchestrator {
    pub fn new(timings: FailoverTimings, auto_restart: bool) -> Self {
        Orchestrator {
            timings,
            auto_restart,
            ..Default::default()
        }
    }

    pub fn spec(&self, s: ServiceId) -> &ServiceSpec {
        &self.specs[s.idx()]
    }

    pub fn replica(&self, r: ReplicaId) -> &Replica {
        &self.replicas[r.service.idx()][r.index as usize]
    }

    pub fn replica_mut(&mut self, r: ReplicaId) -> &mut Replica {
        &mut self.replicas[r.service.idx()][r.index as usize]
    }

    pub fn service_ids(&self) -> impl Iterator<Item = ServiceId> {
        (0..self.specs.len() as u32).map(ServiceId)
    }

    /// All non-retired replicas.
    pub fn all(&self) -> impl Iterator<Item = &Replica> {
        self.replicas.iter().flatten().filter(|r| !r.retired)
    }

    pub fn of_service(&self, s: ServiceId) -> impl Iterator<Item = &Replica> {
        self.replicas[s.idx()].iter().filter(|r| !r.retired)
    }

    /// Service ids fulfilling `role`, in declaration order.
    pub fn with_role(&self, role: Role) -> Vec<ServiceId> {
        self.service_ids().filter(|&s| self.spec(s).role == role).collect()
    }

    /// Replicas per node across all services, counting everything not failed.
    pub fn load(&self) -> BTreeMap<NodeId, u32> {
        let mut m = BTreeMap::new();
        for r in self.all().filter(|r| r.running()) {
            *m.entry(r.node).or_default() += 1;
        }
        m
    }

    pub fn add_service(&mut self, spec: ServiceSpec, nodes: &[NodeId]) -> ServiceId {
        let sid = ServiceId(self.specs.len() as u32);
        let ap = spec.failover == Failover::ActivePassive;
        let version = spec.version;
        let reps = nodes
            .iter()
            .enumerate()
            .map(|(i, &node)| Replica {
                id: ReplicaId::new(sid, i as u32),
                node,
                state: if ap && i > 0 { ReplicaState::Passive } else { ReplicaState::Active },
                version,
                incarnation: 0,
                faulty: false,
                surge: false,
                retired: false,
                failure_handled: false,
            })
            .collect();
        if ap {
            self.leases.insert(sid, ReplicaId::new(sid, 0));
        }
        self.specs.push(spec);
        self.replicas.push(reps);
        sid
    }

    pub fn set_state(&mut self, k: &mut Kernel<impl Sized>, r: ReplicaId, to: ReplicaState) {
        let rep = self.replica_mut(r);
        let from = rep.state;
        if from == to {
            return;
        }
        rep.state = to;
        let node = rep.node;
        k.record(EntityId::Replica(r), Outcome::ReplicaState { replica: r, node, from, to });
    }

    /// Marks every running replica on `node` as Failed. Returns them.
    pub fn fail_node(&mut self, k: &mut Kernel<impl Sized>, node: NodeId) -> Vec<ReplicaId> {
        let hit: Vec<ReplicaId> = self
            .all()
            .filter(|r| r.node == node && r.running())
            .map(|r| r.id)
            .collect();
        for &r in &hit {
            self.fail_replica(k, r);
        }
        hit
    }

    pub fn fail_replica(&mut self, k: &mut Kernel<impl Sized>, r: ReplicaId) {
        self.set_state(k, r, ReplicaState::Failed);
        let rep = self.replica_mut(r);
        rep.failure_handled = false;
        rep.incarnation += 1;
    }

    pub fn is_ap(&self, s: ServiceId) -> bool {
        self.spec(s).failover == Failover::ActivePassive
    }

    pub fn lease_holder(&self, s: ServiceId) -> Option<ReplicaId> {
        self.leases.get(&s).copied()
    }

    pub fn release_lease(&mut self, k: &mut Kernel<impl Sized>, s: ServiceId) -> Option<ReplicaId> {
        let r = self.leases.remove(&s)?;
        k.record(EntityId::Orchestrator, Outcome::LeaseReleased { replica: r });
        Some(r)
    }

    pub fn grant_lease(&mut self, k: &mut Kernel<impl Sized>, r: ReplicaId) {
        self.leases.insert(r.service, r);
        k.record(EntityId::Orchestrator, Outcome::LeaseGranted { replica: r });
        self.set_state(k, r, ReplicaState::Active);
    }

    /// Picks a node for restarting `r`: its own node if that is Up and keeps
    /// the placement rule, otherwise the best node for the service.
    pub fn restart_node(&self, topo: &Topology, r: ReplicaId) -> Option<NodeId> {
        let spec = self.spec(r.service);
        if let Some(pin) = spec.pinned_nodes.get(r.index as usize) {
            let n = topo.nodes().iter().find(|n| &n.name == pin)?;
            return topo.is_up(n.id).then_some(n.id);
        }
        let taken: Vec<NodeId> = self
            .of_service(r.service)
            .filter(|x| x.id != r && x.running())
            .map(|x| x.node)
            .collect();
        let load = self.load();
        let only_dc = if spec.placement == Placement::OnePerDatacenter {
            live_dcs(topo)
                .into_iter()
                .find(|&d| !taken.iter().any(|&t| topo.dc_of(t) == d))
        } else {
            None
        };
        best_node(topo, &taken, &load, only_dc).or_else(|| best_node(topo, &taken, &load, None))
    }

    /// Replica moves that restore the placement rule after a node change.
    /// Only settled replicas move; an active/passive lease holder never does.
    pub fn plan_rebalance(&self, topo: &Topology) -> Vec<(ReplicaId, NodeId)> {
        let mut load = self.load();
        let mut moves = Vec::new();
        for s in self.service_ids() {
            let spec = self.spec(s);
            if !spec.pinned_nodes.is_empty() || self.updates.contains_key(&s) {
                continue;
            }
            let mut where_: Vec<(ReplicaId, NodeId)> = self
                .of_service(s)
                .filter(|r| r.running())
                .map(|r| (r.id, r.node))
                .collect();
            let movable = |r: ReplicaId, this: &Self| {
                let rep = this.replica(r);
                matches!(rep.state, ReplicaState::Active | ReplicaState::Passive)
                    && this.lease_holder(s) != Some(r)
                    && !this.migrations.contains_key(&r)
            };
            for _ in 0..where_.len() {
                let nodes: Vec<NodeId> = where_.iter().map(|w| w.1).collect();
                let crowded = |n: NodeId| nodes.iter().filter(|&&x| x == n).count();
                let dc_count = |d: DcId| nodes.iter().filter(|&&x| topo.dc_of(x) == d).count();
                let empty_dc = live_dcs(topo).into_iter().find(|&d| dc_count(d) == 0);
                let empty_node = topo.up_nodes().find(|&n| crowded(n) == 0);
                // a replica sharing its node, or sitting in an over-covered DC
                let candidate = where_
                    .iter()
                    .rev()
                    .filter(|(r, _)| movable(*r, self))
                    .find(|(_, n)| {
                        (crowded(*n) > 1 && empty_node.is_some())
                            || (empty_dc.is_some() && dc_count(topo.dc_of(*n)) > 1)
                    })
                    .copied();
                let Some((r, from)) = candidate else { break };
                let others: Vec<NodeId> = where_.iter().filter(|w| w.0 != r).map(|w| w.1).collect();
                let target = match (spec.placement, empty_dc) {
                    (_, Some(d)) => best_node(topo, &others, &load, Some(d)),
                    _ => best_node(topo, &others, &load, None),
                };
                let Some(to) = target else { break };
                if to == from {
                    break;
                }
                moves.push((r, to));
                *load.entry(to).or_default() += 1;
                if let Some(c) = load.get_mut(&from) {
                    *c = c.saturating_sub(1);
                }
                for w in &mut where_ {
                    if w.0 == r {
                        w.1 = to;
                    }
                }
            }
        }
        moves
    }

    /// At most one Active replica per active/passive service.
    pub fn check_exclusivity(&self) -> Result<(), String> {
        for s in self.service_ids().filter(|&s| self.is_ap(s)) {
            let active: Vec<u32> = self
                .of_service(s)
                .filter(|r| r.state == ReplicaState::Active)
                .map(|r| r.id.index)
                .collect();
            if active.len() > 1 {
                return Err(format!("service `{}` has active replicas {active:?}", self.spec(s).name));
            }
        }
        Ok(())
    }
}

/// Active intervals per replica of active/passive services, from a trace.
/// Open intervals end at `horizon`.
pub fn active_intervals(
    trace: &crate::sim_core::Trace,
    horizon: SimTime,
) -> BTreeMap<ReplicaId, Vec<(SimTime, SimTime)>> {
    let mut open: BTreeMap<ReplicaId, SimTime> = BTreeMap::new();
    let mut out: BTreeMap<ReplicaId, Vec<(SimTime, SimTime)>> = BTreeMap::new();
    for rec in trace.records() {
        if let Outcome::ReplicaState { replica, from, to, .. } = rec.outcome {
            if to == ReplicaState::Active {
                open.insert(replica, rec.time);
            } else if from == ReplicaState::Active {
                if let Some(s) = open.remove(&replica) {
                    out.entry(replica).or_default().push((s, rec.time));
                }
            }
        }
    }
    for (r, s) in open {
        out.entry(r).or_default().push((s, horizon));
    }
    out
}

/// Pairs of overlapping Active intervals between replicas of one service.
/// Touching intervals (one ends when the other starts) do not overlap.
pub fn overlapping_actives(
    intervals: &BTreeMap<ReplicaId, Vec<(SimTime, SimTime)>>,
    service: ServiceId,
) -> usize {
    let mut all: Vec<(SimTime, SimTime, u32)> = intervals
        .iter()
        .filter(|(r, _)| r.service == service)
        .flat_map(|(r, v)| v.iter().map(move |&(a, b)| (a, b, r.index)))
        .filter(|(a, b, _)| b > a)
        .collect();
    all.sort();
    let mut n = 0;
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            if all[j].0 >= all[i].1 {
                break;
            }
            if all[j].2 != all[i].2 {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LatencyModel, NodeStatus};

    fn five() -> Topology {
        let up = NodeStatus::Up;
        let layout = vec![
            (
                "dc1".to_string(),
                vec![("n1".to_string(), 2, up), ("n4".to_string(), 2, up)],
            ),
            (
                "dc2".to_string(),
                vec![("n2".to_string(), 2, up), ("n5".to_string(), 2, up)],
            ),
            ("dc3".to_string(), vec![("n3".to_string(), 2, up)]),
        ];
        Topology::new(&layout, LatencyModel::default())
    }

    pub(crate) fn spec(name: &str, replicas: u32, placement: Placement) -> ServiceSpec {
        ServiceSpec {
            name: name.into(),
            kind: ServiceKind::Business,
            failover: Failover::ActiveActive,
            replicas,
            placement,
            processing: Dist::Constant(1000.0),
            version: 1,
            role: Role::Custom,
            consumes: vec![],
            forward: None,
            behavior: Behavior::Normal,
            policy: Policy::RoundRobin,
            pinned_nodes: vec![],
        }
    }

    #[test]
    fn spread_covers_three_dcs() {
        let t = five();
        let nodes = place(&spec("a", 3, Placement::Spread), &t, &mut BTreeMap::new()).unwrap();
        let mut dcs: Vec<DcId> = nodes.iter().map(|&n| t.dc_of(n)).collect();
        dcs.sort();
        dcs.dedup();
        assert_eq!(dcs.len(), 3);
        let mut distinct = nodes.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn one_per_dc_exact() {
        let t = five();
        let nodes = place(&spec("a", 3, Placement::OnePerDatacenter), &t, &mut BTreeMap::new()).unwrap();
        let dcs: Vec<u32> = nodes.iter().map(|&n| t.dc_of(n).0).collect();
        assert_eq!(dcs, vec![0, 1, 2]);
    }

    #[test]
    fn pigeonhole_on_two_nodes() {
        let mut t = five();
        for n in [0, 2, 4] {
            t.set_node_status(NodeId(n), NodeStatus::Down).unwrap();
        }
        let nodes = place(&spec("a", 4, Placement::Spread), &t, &mut BTreeMap::new()).unwrap();
        for n in [1, 3] {
            assert_eq!(nodes.iter().filter(|x| x.0 == n).count(), 2);
        }
    }

    #[test]
    fn no_up_nodes_is_insufficient() {
        let mut t = five();
        for n in 0..5 {
            t.set_node_status(NodeId(n), NodeStatus::Down).unwrap();
        }
        assert!(matches!(
            place(&spec("a", 1, Placement::Spread), &t, &mut BTreeMap::new()),
            Err(SimError::InsufficientNodes { .. })
        ));
    }

    #[test]
    fn kind_constraints() {
        let mut s = spec("x", 1, Placement::Spread);
        s.kind = ServiceKind::Infrastructure;
        assert_eq!(s.problems().len(), 1);
        s.kind = ServiceKind::ExternalApi;
        assert_eq!(s.problems().len(), 1);
    }

    #[test]
    fn rebalance_zero_moves_when_satisfied() {
        let t = five();
        let mut o = Orchestrator::new(FailoverTimings::default(), true);
        let mut load = BTreeMap::new();
        let s = spec("a", 3, Placement::Spread);
        let nodes = place(&s, &t, &mut load).unwrap();
        o.add_service(s, &nodes);
        assert!(o.plan_rebalance(&t).is_empty());
    }

    #[test]
    fn rebalance_moves_only_the_doubled_replica() {
        let t = five();
        let mut o = Orchestrator::new(FailoverTimings::default(), true);
        // two replicas squeezed on n2 while n1 (and dc1) is empty
        o.add_service(spec("a", 3, Placement::Spread), &[NodeId(2), NodeId(2), NodeId(4)]);
        let moves = o.plan_rebalance(&t);
        assert_eq!(moves.len(), 1);
        assert_eq!(t.dc_of(moves[0].1).0, 0);
    }

    #[test]
    fn overlap_detection() {
        let s = ServiceId(0);
        let mut m = BTreeMap::new();
        m.insert(ReplicaId::new(s, 0), vec![(SimTime(0), SimTime(10))]);
        m.insert(ReplicaId::new(s, 1), vec![(SimTime(10), SimTime(20))]);
        assert_eq!(overlapping_actives(&m, s), 0);
        m.insert(ReplicaId::new(s, 2), vec![(SimTime(15), SimTime(16))]);
        assert_eq!(overlapping_actives(&m, s), 1);
    }
}
