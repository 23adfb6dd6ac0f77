//! Service registry with health probing and name resolution.
//!
//! Each partition group keeps its own health view of every instance. Views
//! are copied from the shared view when a partition starts; on heal every
//! instance keeps the view of the group it was in, since that side could
//! probe it.


use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::{EntityId, NodeId, ReplicaId, ServiceId};
use crate::sim_core::{Kernel, Outcome, Trace};
use crate::topology::Topology;
use crate::workload::RequestOutcome;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Health {
    Healthy,
    Suspect,
    Unhealthy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    RoundRobin,
    Proximity,
    LeastBusy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealthProbeConfig {
    pub interval_us: u64,
    pub failure_threshold: u32,
    pub recovery_threshold: u32,
}

impl Default for HealthProbeConfig {
    fn default() -> Self {
        HealthProbeConfig {
            interval_us: 1_000_000,
            failure_threshold: 2,
            recovery_threshold: 2,
        }
    }
}

impl HealthProbeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.interval_us == 0 {
            p.push("probe interval must be positive".to_string());
        }
        if self.failure_threshold == 0 || self.recovery_threshold == 0 {
            p.push("probe thresholds must be at least 1".to_string());
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct View {
    health: Health,
    misses: u32,
    successes: u32,
    /// Never failed a probe in this view; the first success makes it Healthy.
    fresh: bool,
}

impl View {
    fn new(health: Health) -> Self {
        View {
            health,
            misses: 0,
            successes: 0,
            fresh: health == Health::Suspect,
        }
    }

    fn observe(&mut self, ok: bool, cfg: &HealthProbeConfig) -> Option<(Health, Health)> {
        let before = self.health;
        if ok {
            self.misses = 0;
            self.successes += 1;
            if before != Health::Healthy {
                self.health = if self.fresh || self.successes >= cfg.recovery_threshold {
                    Health::Healthy
                } else {
                    Health::Suspect
                };
            }
        } else {
            self.fresh = false;
            self.successes = 0;
            self.misses += 1;
            if self.misses >= cfg.failure_threshold {
                self.health = Health::Unhealthy;
            } else if before == Health::Healthy {
                self.health = Health::Suspect;
            }
        }
        if self.health != before {
            Some((before, self.health))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub replica: ReplicaId,
    pub node: NodeId,
    /// Whether the instance takes work; passive standbys are registered but
    /// not resolvable.
    pub serving: bool,
    pub in_flight: u32,
    views: Vec<View>,
}

impl Instance {
    pub fn health(&self, view: u32) -> Health {
        self.views.get(view as usize).unwrap_or(&self.views[0]).health
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub service: ServiceId,
    pub policy: Policy,
    pub instances: Vec<Instance>,
    rr_cursor: usize,
}

/// A health change seen by one partition group's view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub replica: ReplicaId,
    pub view: u32,
    /// The view of the group the instance itself is in.
    pub own_view: bool,
    pub from: Health,
    pub to: Health,
}

#[derive(Clone, Debug)]
pub struct Registry {
    pub config: HealthProbeConfig,
    entries: Vec<RegistryEntry>,
    views: u32,
}

impl Registry {
    pub fn new(config: HealthProbeConfig) -> Self {
        Registry {
            config,
            entries: Vec::new(),
            views: 1,
        }
    }

    pub fn declare(&mut self, service: ServiceId, policy: Policy) {
        while self.entries.len() <= service.idx() {
            let s = ServiceId(self.entries.len() as u32);
            self.entries.push(RegistryEntry {
                service: s,
                policy: Policy::RoundRobin,
                instances: Vec::new(),
                rr_cursor: 0,
            });
        }
        self.entries[service.idx()].policy = policy;
    }

    fn entry_mut(&mut self, service: ServiceId) -> Result<&mut RegistryEntry, SimError> {
        self.entries
            .get_mut(service.idx())
            .ok_or_else(|| SimError::UnknownService(format!("#{}", service.0)))
    }

    pub fn entry(&self, service: ServiceId) -> Option<&RegistryEntry> {
        self.entries.get(service.idx())
    }

    /// Adds an instance in `health` (Suspect for fresh starts). Registering a
    /// known replica updates its node and keeps its health.
    pub fn register(&mut self, replica: ReplicaId, node: NodeId, health: Health, serving: bool) -> Result<(), SimError> {
        let views = self.views as usize;
        let e = self.entry_mut(replica.service)?;
        if let Some(i) = e.instances.iter_mut().find(|i| i.replica == replica) {
            i.node = node;
            i.serving = serving;
            return Ok(());
        }
        e.instances.push(Instance {
            replica,
            node,
            serving,
            in_flight: 0,
            views: vec![View::new(health); views],
        });
        Ok(())
    }

    pub fn deregister(&mut self, replica: ReplicaId) -> Result<bool, SimError> {
        let e = self.entry_mut(replica.service)?;
        let before = e.instances.len();
        e.instances.retain(|i| i.replica != replica);
        Ok(e.instances.len() != before)
    }

    pub fn set_serving(&mut self, replica: ReplicaId, serving: bool) {
        if let Some(i) = self.instance_mut(replica) {
            i.serving = serving;
        }
    }

    pub fn add_in_flight(&mut self, replica: ReplicaId, delta: i32) {
        if let Some(i) = self.instance_mut(replica) {
            i.in_flight = i.in_flight.saturating_add_signed(delta);
        }
    }

    fn instance_mut(&mut self, replica: ReplicaId) -> Option<&mut Instance> {
        self.entries
            .get_mut(replica.service.idx())?
            .instances
            .iter_mut()
            .find(|i| i.replica == replica)
    }

    pub fn instance(&self, replica: ReplicaId) -> Option<&Instance> {
        self.entries
            .get(replica.service.idx())?
            .instances
            .iter()
            .find(|i| i.replica == replica)
    }

    /// Health as seen from the instance's own partition group.
    pub fn liveness(&self, replica: ReplicaId, topo: &Topology) -> Option<Health> {
        let i = self.instance(replica)?;
        Some(i.health(topo.group_of(i.node)))
    }

    pub fn is_healthy(&self, replica: ReplicaId, topo: &Topology) -> bool {
        self.liveness(replica, topo) == Some(Health::Healthy)
    }

    /// Probes every instance. `alive` reports whether the replica process
    /// answers; the view of group `g` succeeds only for instances on Up nodes
    /// inside `g`.
    pub fn probe_tick<F>(&mut self, k: &mut Kernel<impl Sized>, topo: &Topology, alive: F) -> Vec<Transition>
    where
        F: Fn(ReplicaId) -> bool,
    {
        k.record(EntityId::Registry, Outcome::ProbeTick);
        let cfg = self.config.clone();
        let views = self.views;
        let mut out = Vec::new();
        for e in &mut self.entries {
            for inst in &mut e.instances {
                let up = topo.is_up(inst.node) && alive(inst.replica);
                let own = topo.group_of(inst.node);
                for g in 0..views {
                    let ok = up && own == g;
                    if let Some((from, to)) = inst.views[g as usize].observe(ok, &cfg) {
                        k.record(
                            EntityId::Replica(inst.replica),
                            Outcome::Health {
                                replica: inst.replica,
                                view: g,
                                from,
                                to,
                            },
                        );
                        out.push(Transition {
                            replica: inst.replica,
                            view: g,
                            own_view: own == g,
                            from,
                            to,
                        });
                    }
                }
            }
        }
        out
    }

    /// Forks the shared view into one per partition group.
    pub fn on_partition(&mut self, topo: &Topology) {
        let n = topo.group_count();
        for e in &mut self.entries {
            for inst in &mut e.instances {
                let base = inst.views[0];
                inst.views = vec![base; n as usize];
            }
        }
        self.views = n;
    }

    /// Collapses to a single view. Must run while `topo` still reflects the
    /// partition, so each instance keeps the view of its own group.
    pub fn merge_views(&mut self, topo: &Topology) {
        for e in &mut self.entries {
            for inst in &mut e.instances {
                let own = topo.group_of(inst.node) as usize;
                let keep = *inst.views.get(own).unwrap_or(&inst.views[0]);
                inst.views = vec![keep];
            }
        }
        self.views = 1;
    }

    /// Picks a Healthy, serving, reachable instance for `requester`.
    pub fn resolve(
        &mut self,
        k: &mut Kernel<impl Sized>,
        topo: &Topology,
        service: ServiceId,
        requester: NodeId,
    ) -> Result<ReplicaId, SimError> {
        let view = topo.group_of(requester);
        let e = self.entry_mut(service)?;
        let healthy: Vec<&Instance> = e
            .instances
            .iter()
            .filter(|i| i.serving && i.health(view) == Health::Healthy && topo.deliverable(requester, i.node))
            .collect();
        if healthy.is_empty() {
            k.record(EntityId::Registry, Outcome::NoHealthyInstance { service });
            return Err(SimError::NoHealthyInstance(format!("#{}", service.0)));
        }
        let narrowed: Vec<&Instance> = match e.policy {
            Policy::RoundRobin => healthy,
            Policy::Proximity => {
                let best = healthy.iter().map(|i| topo.distance(requester, i.node)).min().unwrap();
                healthy
                    .into_iter()
                    .filter(|i| topo.distance(requester, i.node) == best)
                    .collect()
            }
            Policy::LeastBusy => {
                let best = healthy.iter().map(|i| i.in_flight).min().unwrap();
                healthy.into_iter().filter(|i| i.in_flight == best).collect()
            }
        };
        let pick = narrowed[e.rr_cursor % narrowed.len()].replica;
        e.rr_cursor = e.rr_cursor.wrapping_add(1);
        k.record(EntityId::Registry, Outcome::Resolved { service, replica: pick });
        Ok(pick)
    }
}

/// True iff every request that reached an outcome reached `Completed`.
/// Requests still pending when the trace ends are not judged.
pub fn single_service_illusion_check(trace: &Trace) -> bool {
    trace
        .records()
        .iter()
        .all(|r| !matches!(r.outcome, Outcome::RequestDone { outcome, .. } if outcome != RequestOutcome::Completed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::Names;
    use crate::topology::{LatencyModel, NodeStatus};

    fn topo() -> Topology {
        let layout = vec![
            (
                "dc1".to_string(),
                vec![("a1".to_string(), 2, NodeStatus::Up), ("a2".to_string(), 2, NodeStatus::Up)],
            ),
            ("dc2".to_string(), vec![("b1".to_string(), 2, NodeStatus::Up)]),
        ];
        Topology::new(&layout, LatencyModel::default())
    }

    fn r(i: u32) -> ReplicaId {
        ReplicaId::new(ServiceId(0), i)
    }

    fn setup(policy: Policy) -> (Registry, Kernel<()>, Topology) {
        let mut reg = Registry::new(HealthProbeConfig::default());
        reg.declare(ServiceId(0), policy);
        for i in 0..3 {
            reg.register(r(i), NodeId(i), Health::Healthy, true).unwrap();
        }
        (reg, Kernel::new(0, Names::default()), topo())
    }

    #[test]
    fn register_then_probe_becomes_healthy() {
        let (mut reg, mut k, t) = setup(Policy::RoundRobin);
        reg.register(r(7), NodeId(0), Health::Suspect, true).unwrap();
        reg.register(r(7), NodeId(0), Health::Suspect, true).unwrap();
        assert_eq!(reg.entry(ServiceId(0)).unwrap().instances.len(), 4);
        let tr = reg.probe_tick(&mut k, &t, |_| true);
        assert_eq!(tr.len(), 1);
        assert_eq!((tr[0].from, tr[0].to), (Health::Suspect, Health::Healthy));
    }

    #[test]
    fn round_robin_cycles() {
        let (mut reg, mut k, t) = setup(Policy::RoundRobin);
        let got: Vec<u32> = (0..4)
            .map(|_| reg.resolve(&mut k, &t, ServiceId(0), NodeId(0)).unwrap().index)
            .collect();
        assert_eq!(got, vec![0, 1, 2, 0]);
    }

    #[test]
    fn deregistered_never_resolved() {
        let (mut reg, mut k, t) = setup(Policy::RoundRobin);
        reg.deregister(r(1)).unwrap();
        for _ in 0..6 {
            assert_ne!(reg.resolve(&mut k, &t, ServiceId(0), NodeId(0)).unwrap(), r(1));
        }
    }

    #[test]
    fn proximity_prefers_same_dc() {
        let (mut reg, mut k, t) = setup(Policy::Proximity);
        reg.deregister(r(0)).unwrap();
        for _ in 0..5 {
            // requester a1: a2 is same-DC, b1 is not
            assert_eq!(reg.resolve(&mut k, &t, ServiceId(0), NodeId(0)).unwrap(), r(1));
        }
    }

    #[test]
    fn least_busy_picks_idle() {
        let (mut reg, mut k, t) = setup(Policy::LeastBusy);
        reg.deregister(r(2)).unwrap();
        reg.add_in_flight(r(0), 2);
        assert_eq!(reg.resolve(&mut k, &t, ServiceId(0), NodeId(0)).unwrap(), r(1));
    }

    #[test]
    fn two_misses_make_unhealthy() {
        let (mut reg, mut k, mut t) = setup(Policy::RoundRobin);
        t.set_node_status(NodeId(2), NodeStatus::Down).unwrap();
        let first = reg.probe_tick(&mut k, &t, |_| true);
        assert_eq!(first[0].to, Health::Suspect);
        let second = reg.probe_tick(&mut k, &t, |_| true);
        assert_eq!(second[0].to, Health::Unhealthy);
        assert!(matches!(
            reg.resolve(&mut k, &t, ServiceId(0), NodeId(2)),
            Err(SimError::NoHealthyInstance(_))
        ));
    }

    #[test]
    fn flapping_stays_suspect() {
        let (mut reg, mut k, mut t) = setup(Policy::RoundRobin);
        let mut seen = Vec::new();
        for tick in 0..10 {
            let status = if tick % 2 == 0 { NodeStatus::Down } else { NodeStatus::Up };
            t.set_node_status(NodeId(2), status).unwrap();
            reg.probe_tick(&mut k, &t, |_| true);
            seen.push(reg.instance(r(2)).unwrap().health(0));
        }
        assert!(seen.iter().all(|h| *h == Health::Suspect), "{seen:?}");
    }

    #[test]
    fn partition_isolates_view() {
        let (mut reg, mut k, mut t) = setup(Policy::RoundRobin);
        t.apply_partition(&[vec![NodeId(0), NodeId(1)], vec![NodeId(2)]]).unwrap();
        reg.on_partition(&t);
        reg.probe_tick(&mut k, &t, |_| true);
        reg.probe_tick(&mut k, &t, |_| true);
        let b1 = reg.instance(r(2)).unwrap();
        assert_eq!(b1.health(t.group_of(NodeId(0))), Health::Unhealthy);
        assert_eq!(b1.health(t.group_of(NodeId(2))), Health::Healthy);
        reg.merge_views(&t);
        t.heal();
        assert!(reg.is_healthy(r(2), &t));
    }
}
