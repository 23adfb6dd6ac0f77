//! Datacenters, nodes, link latencies and network partitions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::{DcId, EntityId, NodeId};
use crate::sim_core::{Dist, EventId, EventKind, Kernel, Outcome};

pub const NETWORK_STREAM: &str = "network";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Up,
    Down,
}

/// Class of a network send, used for drop records and traffic accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Traffic {
    Publish,
    Delivery,
    Ack,
    DirectCall,
    Reply,
    CacheCall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datacenter {
    pub id: DcId,
    pub name: String,
    pub nodes: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub dc: DcId,
    pub capacity: u32,
    pub status: NodeStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub intra_dc: Dist,
    pub inter_dc: Dist,
    pub mainframe_call: Dist,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            intra_dc: Dist::constant_us(500),
            inter_dc: Dist::constant_us(2_000),
            mainframe_call: Dist::constant_us(20_000),
        }
    }
}

impl LatencyModel {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, d) in [
            ("intra_dc", &self.intra_dc),
            ("inter_dc", &self.inter_dc),
            ("mainframe_call", &self.mainframe_call),
        ] {
            if !d.is_well_formed() || !d.is_strictly_positive() {
                out.push(format!("{name} latency must be a well-formed, strictly positive distribution"));
            }
        }
        if self.inter_dc.mean() < self.intra_dc.mean() {
            out.push("mean inter_dc latency must be >= mean intra_dc latency".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionState {
    pub groups: Vec<BTreeSet<NodeId>>,
}

impl PartitionState {
    pub fn is_healed(&self) -> bool {
        self.groups.len() <= 1
    }
}

/// Result of a send attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Scheduled { event: EventId, latency_us: u64 },
    Dropped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub messages: u64,
    pub cross_dc_messages: u64,
}

/// One datacenter: its name and `(node name, capacity, initial status)` per node.
pub type DcLayout = (String, Vec<(String, u32, NodeStatus)>);

#[derive(Clone, Debug)]
pub struct Topology {
    datacenters: Vec<Datacenter>,
    nodes: Vec<Node>,
    pub latency: LatencyModel,
    /// Partition group per node; all zero when healed.
    group_of: Vec<u32>,
    group_count: u32,
    counters: TrafficCounters,
}

impl Topology {
    /// Builds a topology from `(datacenter name, [(node name, capacity, status)])`.
    pub fn new(layout: &[DcLayout], latency: LatencyModel) -> Self {
        let mut datacenters = Vec::new();
        let mut nodes = Vec::new();
        for (di, (dc_name, dc_nodes)) in layout.iter().enumerate() {
            let dc = DcId(di as u32);
            let mut ids = Vec::new();
            for (name, capacity, status) in dc_nodes {
                let id = NodeId(nodes.len() as u32);
                nodes.push(Node {
                    id,
                    name: name.clone(),
                    dc,
                    capacity: *capacity,
                    status: *status,
                });
                ids.push(id);
            }
            datacenters.push(Datacenter {
                id: dc,
                name: dc_name.clone(),
                nodes: ids,
            });
        }
        let n = nodes.len();
        Topology {
            datacenters,
            nodes,
            latency,
            group_of: vec![0; n],
            group_count: 1,
            counters: TrafficCounters::default(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn datacenters(&self) -> &[Datacenter] {
        &self.datacenters
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.idx()]
    }

    fn check(&self, id: NodeId) -> Result<(), SimError> {
        if id.idx() < self.nodes.len() {
            Ok(())
        } else {
            Err(SimError::UnknownNode(format!("#{}", id.0)))
        }
    }

    pub fn dc_of(&self, id: NodeId) -> DcId {
        self.nodes[id.idx()].dc
    }

    pub fn is_up(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].status == NodeStatus::Up
    }

    pub fn up_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(|n| n.status == NodeStatus::Up).map(|n| n.id)
    }

    pub fn group_of(&self, id: NodeId) -> u32 {
        self.group_of[id.idx()]
    }

    pub fn is_partitioned(&self) -> bool {
        self.group_count > 1
    }

    pub fn group_count(&self) -> u32 {
        self.group_count
    }

    pub fn counters(&self) -> TrafficCounters {
        self.counters
    }

    /// Symmetric: both nodes up and in the same partition group.
    pub fn deliverable(&self, a: NodeId, b: NodeId) -> bool {
        self.is_up(a) && self.is_up(b) && self.group_of(a) == self.group_of(b)
    }

    /// 0 = same node, 1 = same datacenter, 2 = other datacenter.
    pub fn distance(&self, a: NodeId, b: NodeId) -> u8 {
        if a == b {
            0
        } else if self.dc_of(a) == self.dc_of(b) {
            1
        } else {
            2
        }
    }

    /// Draws a one-way latency for `from -> to`. Same node costs nothing.
    pub fn draw_latency<P>(&self, k: &mut Kernel<P>, from: NodeId, to: NodeId) -> u64 {
        let dist = match self.distance(from, to) {
            0 => return 0,
            1 => &self.latency.intra_dc,
            _ => &self.latency.inter_dc,
        };
        k.rng
            .draw_us(NETWORK_STREAM, dist)
            .expect("network stream registered at run start")
    }

    fn count(&mut self, from: NodeId, to: NodeId) {
        self.counters.messages += 1;
        if self.dc_of(from) != self.dc_of(to) {
            self.counters.cross_dc_messages += 1;
        }
    }

    /// Sends `payload` from one node to another. Reachable pairs get an event at
    /// `now + latency`; anything else is recorded as dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn deliver<P>(
        &mut self,
        k: &mut Kernel<P>,
        from: NodeId,
        to: NodeId,
        what: Traffic,
        kind: EventKind,
        target: EntityId,
        payload: P,
    ) -> Result<Delivery, SimError> {
        self.check(from)?;
        self.check(to)?;
        if !self.deliverable(from, to) {
            k.record(EntityId::Node(from), Outcome::Dropped { from, to, what });
            return Ok(Delivery::Dropped);
        }
        self.count(from, to);
        let latency_us = self.draw_latency(k, from, to);
        let event = k.sched.schedule_in(latency_us, kind, target, payload);
        Ok(Delivery::Scheduled { event, latency_us })
    }

    /// Synchronous request/response exchange. Returns the round-trip time or
    /// `None` when the pair is not reachable.
    pub fn round_trip<P>(&mut self, k: &mut Kernel<P>, from: NodeId, to: NodeId) -> Option<u64> {
        if !self.deliverable(from, to) {
            k.record(
                EntityId::Node(from),
                Outcome::Dropped {
                    from,
                    to,
                    what: Traffic::CacheCall,
                },
            );
            return None;
        }
        self.count(from, to);
        self.count(to, from);
        let there = self.draw_latency(k, from, to);
        let back = self.draw_latency(k, to, from);
        Some(there + back)
    }

    /// Upholds the in-flight rule: a message arriving after its path was cut
    /// (node loss or partition) is dropped at arrival.
    pub fn arrival_ok<P>(&self, k: &mut Kernel<P>, from: NodeId, to: NodeId, what: Traffic) -> bool {
        if self.deliverable(from, to) {
            true
        } else {
            k.record(EntityId::Node(to), Outcome::Dropped { from, to, what });
            false
        }
    }

    pub fn partition_state(&self) -> PartitionState {
        let mut groups = vec![BTreeSet::new(); self.group_count as usize];
        for n in &self.nodes {
            groups[self.group_of[n.id.idx()] as usize].insert(n.id);
        }
        PartitionState { groups }
    }

    /// Replaces the partition state. Groups must be disjoint and cover every up
    /// node; omitted down nodes are isolated if they come back.
    pub fn apply_partition(&mut self, groups: &[Vec<NodeId>]) -> Result<PartitionState, SimError> {
        let mut seen = BTreeSet::new();
        for g in groups {
            for &n in g {
                self.check(n)?;
                if !seen.insert(n) {
                    return Err(SimError::InvalidPartition(format!(
                        "node {} appears in more than one group",
                        self.nodes[n.idx()].name
                    )));
                }
            }
        }
        for n in self.up_nodes() {
            if !seen.contains(&n) {
                return Err(SimError::InvalidPartition(format!(
                    "up node {} is not in any group",
                    self.nodes[n.idx()].name
                )));
            }
        }
        if groups.iter().filter(|g| !g.is_empty()).count() < 2 {
            return Err(SimError::InvalidPartition("a partition needs at least two non-empty groups".into()));
        }
        let mut next = 0u32;
        let mut assign = vec![u32::MAX; self.nodes.len()];
        for g in groups.iter().filter(|g| !g.is_empty()) {
            for &n in g {
                assign[n.idx()] = next;
            }
            next += 1;
        }
        for a in assign.iter_mut() {
            if *a == u32::MAX {
                *a = next;
                next += 1;
            }
        }
        self.group_of = assign;
        self.group_count = next;
        Ok(self.partition_state())
    }

    pub fn heal(&mut self) -> PartitionState {
        self.group_of.iter_mut().for_each(|g| *g = 0);
        self.group_count = 1;
        self.partition_state()
    }

    /// Returns whether the status actually changed.
    pub fn set_node_status(&mut self, node: NodeId, status: NodeStatus) -> Result<bool, SimError> {
        self.check(node)?;
        let n = &mut self.nodes[node.idx()];
        if n.status == status {
            return Ok(false);
        }
        n.status = status;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::Names;

    fn topo() -> Topology {
        let layout = vec![
            ("dc1".to_string(), vec![("a".to_string(), 2, NodeStatus::Up)]),
            (
                "dc2".to_string(),
                vec![("b".to_string(), 2, NodeStatus::Up), ("c".to_string(), 2, NodeStatus::Up)],
            ),
        ];
        Topology::new(&layout, LatencyModel::default())
    }

    fn kernel() -> Kernel<u8> {
        let mut k = Kernel::new(1, Names::default());
        k.rng.register(NETWORK_STREAM);
        k
    }

    const A: NodeId = NodeId(0);
    const B: NodeId = NodeId(1);
    const C: NodeId = NodeId(2);

    fn send(t: &mut Topology, k: &mut Kernel<u8>, from: NodeId, to: NodeId) -> Delivery {
        t.deliver(k, from, to, Traffic::Delivery, EventKind::MessageDelivery, EntityId::Node(to), 0)
            .unwrap()
    }

    #[test]
    fn same_node_is_immediate() {
        let (mut t, mut k) = (topo(), kernel());
        assert!(matches!(send(&mut t, &mut k, A, A), Delivery::Scheduled { latency_us: 0, .. }));
        let ev = k.sched.pop_until(crate::sim_core::SimTime(0)).unwrap();
        assert_eq!(ev.fire_at.0, 0);
    }

    #[test]
    fn cross_dc_constant_latency() {
        let (mut t, mut k) = (topo(), kernel());
        assert!(matches!(send(&mut t, &mut k, A, B), Delivery::Scheduled { latency_us: 2_000, .. }));
        assert!(matches!(send(&mut t, &mut k, B, C), Delivery::Scheduled { latency_us: 500, .. }));
        assert_eq!(t.counters().cross_dc_messages, 1);
        assert_eq!(t.counters().messages, 2);
    }

    #[test]
    fn partition_drops_across_and_keeps_within() {
        let (mut t, mut k) = (topo(), kernel());
        t.apply_partition(&[vec![A], vec![B, C]]).unwrap();
        assert_eq!(send(&mut t, &mut k, A, B), Delivery::Dropped);
        assert!(matches!(k.trace.records().last().unwrap().outcome, Outcome::Dropped { .. }));
        assert!(matches!(send(&mut t, &mut k, B, C), Delivery::Scheduled { .. }));
        for x in [A, B, C] {
            for y in [A, B, C] {
                assert_eq!(t.deliverable(x, y), t.deliverable(y, x));
            }
        }
        let healed = t.heal();
        assert!(healed.is_healed());
        assert!(t.deliverable(A, B));
    }

    #[test]
    fn invalid_partitions() {
        let mut t = topo();
        assert!(matches!(
            t.apply_partition(&[vec![A, B], vec![B, C]]),
            Err(SimError::InvalidPartition(_))
        ));
        assert!(matches!(t.apply_partition(&[vec![A], vec![B]]), Err(SimError::InvalidPartition(_))));
        t.set_node_status(C, NodeStatus::Down).unwrap();
        // down nodes may be omitted
        assert!(t.apply_partition(&[vec![A], vec![B]]).is_ok());
    }

    #[test]
    fn node_status_changes_and_noops() {
        let (mut t, mut k) = (topo(), kernel());
        assert!(t.set_node_status(B, NodeStatus::Down).unwrap());
        assert!(!t.set_node_status(B, NodeStatus::Down).unwrap());
        assert_eq!(send(&mut t, &mut k, A, B), Delivery::Dropped);
        assert!(matches!(t.set_node_status(NodeId(9), NodeStatus::Up), Err(SimError::UnknownNode(_))));
    }

    #[test]
    fn latency_model_checks() {
        let mut m = LatencyModel::default();
        assert!(m.problems().is_empty());
        m.inter_dc = Dist::constant_us(100);
        assert_eq!(m.problems().len(), 1);
        m.intra_dc = Dist::Constant(0.0);
        assert!(!m.problems().is_empty());
    }
}
