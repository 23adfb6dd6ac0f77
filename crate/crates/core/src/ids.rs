//! Compact identifiers shared by every module, plus the name table used to
//! render them.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! index_id {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn idx(self) -> usize {
                self.0 as usize
            }
        }
    };
}

index_id!(NodeId);
index_id!(DcId);
index_id!(ServiceId);
index_id!(QueueId);
index_id!(ExchangeId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId {
    pub service: ServiceId,
    pub index: u32,
}

impl ReplicaId {
    pub fn new(service: ServiceId, index: u32) -> Self {
        ReplicaId { service, index }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// What a trace line is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityId {
    Node(NodeId),
    Replica(ReplicaId),
    Service(ServiceId),
    Queue(QueueId),
    Request(RequestId),
    Source(u32),
    Broker,
    Registry,
    Orchestrator,
    Topology,
    Workload,
}

/// Name table for rendering ids. Indices are assigned in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Names {
    pub nodes: Vec<String>,
    pub datacenters: Vec<String>,
    pub services: Vec<String>,
    pub queues: Vec<String>,
    pub exchanges: Vec<String>,
}

impl Names {
    pub fn node(&self, id: NodeId) -> &str {
        self.nodes.get(id.idx()).map(String::as_str).unwrap_or("?")
    }

    pub fn dc(&self, id: DcId) -> &str {
        self.datacenters.get(id.idx()).map(String::as_str).unwrap_or("?")
    }

    pub fn service(&self, id: ServiceId) -> &str {
        self.services.get(id.idx()).map(String::as_str).unwrap_or("?")
    }

    pub fn queue(&self, id: QueueId) -> &str {
        self.queues.get(id.idx()).map(String::as_str).unwrap_or("?")
    }

    pub fn replica(&self, id: ReplicaId) -> String {
        format!("{}#{}", self.service(id.service), id.index)
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n == name).map(|i| NodeId(i as u32))
    }

    pub fn service_id(&self, name: &str) -> Option<ServiceId> {
        self.services.iter().position(|n| n == name).map(|i| ServiceId(i as u32))
    }

    pub fn queue_id(&self, name: &str) -> Option<QueueId> {
        self.queues.iter().position(|n| n == name).map(|i| QueueId(i as u32))
    }

    pub fn entity(&self, e: &EntityId) -> String {
        match *e {
            EntityId::Node(n) => self.node(n).to_string(),
            EntityId::Replica(r) => self.replica(r),
            EntityId::Service(s) => self.service(s).to_string(),
            EntityId::Queue(q) => format!("queue:{}", self.queue(q)),
            EntityId::Request(r) => r.to_string(),
            EntityId::Source(i) => format!("source{i}"),
            EntityId::Broker => "broker".into(),
            EntityId::Registry => "registry".into(),
            EntityId::Orchestrator => "orchestrator".into(),
            EntityId::Topology => "topology".into(),
            EntityId::Workload => "workload".into(),
        }
    }
}
