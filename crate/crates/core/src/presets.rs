//! The two built-in architectures: a three-host monolith with every
//! component replicated on each host, and five hosts in three datacenters
//! running bus-integrated services.

use serde::{Deserialize, Serialize};

use crate::bus::QueueMode;
use crate::discovery::Policy;
use crate::orchestrator::{Behavior, Failover, Placement, Role, ServiceKind, ServiceSpec};
use crate::sim_core::Dist;
use crate::topology::NodeStatus;

pub const DEFAULT_CAPACITY: u32 = 2;
pub const STAGE_US: u64 = 1_000;
pub const BACKGROUND_US: u64 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    Monolith,
    Microservice,
    Custom,
}

impl PresetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "monolith" => Some(PresetKind::Monolith),
            "microservice" | "microservices" => Some(PresetKind::Microservice),
            "custom" => Some(PresetKind::Custom),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PresetKind::Monolith => "monolith",
            PresetKind::Microservice => "microservice",
            PresetKind::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub name: String,
    #[serde(default = "default_capacity")]
    pub capacity: u32,
    #[serde(default = "default_status")]
    pub status: NodeStatus,
}

fn default_capacity() -> u32 {
    DEFAULT_CAPACITY
}

fn default_status() -> NodeStatus {
    NodeStatus::Up
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcDecl {
    pub name: String,
    pub nodes: Vec<NodeDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueDecl {
    pub name: String,
    #[serde(default = "default_mode")]
    pub mode: QueueMode,
}

fn default_mode() -> QueueMode {
    QueueMode::LoadBalanced
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingDecl {
    pub exchange: String,
    pub queue: String,
    pub pattern: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusDecl {
    pub exchanges: Vec<String>,
    pub queues: Vec<QueueDecl>,
    pub bindings: Vec<BindingDecl>,
}

impl BusDecl {
    /// Adds `other`'s declarations not already present.
    pub fn extend(&mut self, other: &BusDecl) {
        for e in &other.exchanges {
            if !self.exchanges.contains(e) {
                self.exchanges.push(e.clone());
            }
        }
        for q in &other.queues {
            if !self.queues.iter().any(|x| x.name == q.name) {
                self.queues.push(q.clone());
            }
        }
        for b in &other.bindings {
            if !self.bindings.contains(b) {
                self.bindings.push(b.clone());
            }
        }
    }
}

/// Everything a preset fixes before scenario overrides apply.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetParts {
    pub layout: Vec<DcDecl>,
    pub services: Vec<ServiceSpec>,
    pub bus: BusDecl,
    /// Failed replicas are restarted automatically; otherwise they come
    /// back only when their host is restored.
    pub auto_restart: bool,
}

fn layout(spec: &[(&str, &[&str])]) -> Vec<DcDecl> {
    spec.iter()
        .map(|(dc, nodes)| DcDecl {
            name: dc.to_string(),
            nodes: nodes
                .iter()
                .map(|n| NodeDecl {
                    name: n.to_string(),
                    capacity: DEFAULT_CAPACITY,
                    status: NodeStatus::Up,
                })
                .collect(),
        })
        .collect()
}

struct S {
    name: &'static str,
    kind: ServiceKind,
    failover: Failover,
    replicas: u32,
    placement: Placement,
    us: u64,
    role: Role,
    consumes: &'static [&'static str],
}

impl S {
    fn build(self) -> ServiceSpec {
        ServiceSpec {
            name: self.name.to_string(),
            kind: self.kind,
            failover: self.failover,
            replicas: self.replicas,
            placement: self.placement,
            processing: Dist::constant_us(self.us),
            version: 1,
            role: self.role,
            consumes: self.consumes.iter().map(|s| s.to_string()).collect(),
            forward: None,
            behavior: Behavior::Normal,
            policy: Policy::RoundRobin,
            pinned_nodes: Vec::new(),
        }
    }
}

fn q(name: &str, mode: QueueMode) -> QueueDecl {
    QueueDecl {
        name: name.to_string(),
        mode,
    }
}

fn b(exchange: &str, queue: &str, pattern: &str) -> BindingDecl {
    BindingDecl {
        exchange: exchange.to_string(),
        queue: queue.to_string(),
        pattern: pattern.to_string(),
    }
}

use Failover::{ActiveActive as AA, ActivePassive as AP};
use Placement::{OnePerDatacenter as PerDc, Spread};

/// Three hosts, one per datacenter. Components start in declaration order
/// when a host comes back.
pub fn monolith() -> PresetParts {
    let mc = ServiceKind::MonolithComponent;
    let services = vec![
        S { name: "RabbitMQ", kind: ServiceKind::Infrastructure, failover: AA, replicas: 3, placement: PerDc, us: 0, role: Role::Broker, consumes: &[] },
        S { name: "ExternalAPI", kind: ServiceKind::ExternalApi, failover: AP, replicas: 3, placement: Spread, us: STAGE_US, role: Role::ExternalApi, consumes: &["response-q"] },
        S { name: "ForexAPI", kind: mc, failover: AA, replicas: 3, placement: Spread, us: STAGE_US, role: Role::ForexApi, consumes: &["forexapi-q"] },
        S { name: "PushService", kind: mc, failover: AA, replicas: 3, placement: Spread, us: BACKGROUND_US, role: Role::Sink, consumes: &["push-q"] },
        S { name: "RequestService", kind: mc, failover: AA, replicas: 3, placement: Spread, us: STAGE_US, role: Role::RequestService, consumes: &[] },
    ];
    PresetParts {
        layout: layout(&[("dc1", &["n1"]), ("dc2", &["n2"]), ("dc3", &["n3"])]),
        services: services.into_iter().map(S::build).collect(),
        bus: BusDecl {
            exchanges: vec!["ingress".into(), "responses".into()],
            queues: vec![
                q("forexapi-q", QueueMode::LoadBalanced),
                q("response-q", QueueMode::LoadBalanced),
                q("push-q", QueueMode::Broadcast),
            ],
            bindings: vec![
                b("ingress", "forexapi-q", "request.*"),
                b("responses", "response-q", "response.*"),
                b("responses", "push-q", "response.*"),
            ],
        },
        auto_restart: false,
    }
}

/// Five hosts across three datacenters.
pub fn microservice() -> PresetParts {
    let biz = ServiceKind::Business;
    let fnd = ServiceKind::Foundation;
    let infra = ServiceKind::Infrastructure;
    let mut services = vec![
        S { name: "RabbitMQ", kind: infra, failover: AA, replicas: 3, placement: PerDc, us: 0, role: Role::Broker, consumes: &[] },
        S { name: "RedisCache", kind: infra, failover: AA, replicas: 3, placement: PerDc, us: 0, role: Role::Cache, consumes: &[] },
        S { name: "ExternalProviderAPI", kind: ServiceKind::ExternalApi, failover: AP, replicas: 2, placement: Spread, us: STAGE_US, role: Role::ExternalApi, consumes: &["response-q"] },
        S { name: "AuthService", kind: biz, failover: AA, replicas: 3, placement: Spread, us: STAGE_US, role: Role::Auth, consumes: &["auth-q"] },
        S { name: "TradingService", kind: biz, failover: AA, replicas: 3, placement: Spread, us: STAGE_US, role: Role::Trading, consumes: &["trading-q"] },
        S { name: "LineCheckService", kind: biz, failover: AA, replicas: 3, placement: Spread, us: STAGE_US, role: Role::LineCheck, consumes: &["linecheck-q"] },
        S { name: "ResponsibilityService", kind: biz, failover: AA, replicas: 2, placement: Spread, us: STAGE_US, role: Role::Responsibility, consumes: &[] },
        S { name: "LoggingService", kind: fnd, failover: AA, replicas: 2, placement: Spread, us: BACKGROUND_US, role: Role::Sink, consumes: &["logging-q"] },
        S { name: "TracingService", kind: fnd, failover: AA, replicas: 2, placement: Spread, us: BACKGROUND_US, role: Role::Sink, consumes: &["tracing-q"] },
    ]
    .into_iter()
    .map(S::build)
    .collect::<Vec<_>>();
    for name in ["MonitoringService", "ConfigurationService", "FailoverService", "DataSyncService"] {
        let mut s = S { name: "", kind: fnd, failover: AA, replicas: 2, placement: Spread, us: BACKGROUND_US, role: Role::Sink, consumes: &[] }.build();
        s.name = name.to_string();
        services.push(s);
    }
    PresetParts {
        layout: layout(&[("dc1", &["n1", "n4"]), ("dc2", &["n2", "n5"]), ("dc3", &["n3"])]),
        services,
        bus: BusDecl {
            exchanges: vec!["ingress".into(), "business".into(), "responses".into()],
            queues: vec![
                q("auth-q", QueueMode::LoadBalanced),
                q("trading-q", QueueMode::LoadBalanced),
                q("linecheck-q", QueueMode::LoadBalanced),
                q("response-q", QueueMode::LoadBalanced),
                q("logging-q", QueueMode::Broadcast),
                q("tracing-q", QueueMode::Broadcast),
            ],
            bindings: vec![
                b("ingress", "auth-q", "request.*"),
                b("business", "trading-q", "trade.*"),
                b("business", "linecheck-q", "linecheck.*"),
                b("responses", "response-q", "response.*"),
                b("responses", "logging-q", "response.*"),
                b("responses", "tracing-q", "response.*"),
            ],
        },
        auto_restart: true,
    }
}

pub fn parts(kind: PresetKind) -> PresetParts {
    match kind {
        PresetKind::Monolith => monolith(),
        PresetKind::Microservice => microservice(),
        PresetKind::Custom => PresetParts {
            layout: Vec::new(),
            services: Vec::new(),
            bus: BusDecl::default(),
            auto_restart: true,
        },
    }
}

/// Human-readable inventory of a preset.
pub fn describe(kind: PresetKind, services: &[ServiceSpec], layout: &[DcDecl]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "preset {}", kind.as_str());
    let nodes: usize = layout.iter().map(|d| d.nodes.len()).sum();
    let _ = writeln!(out, "  topology: {} datacenters, {} nodes", layout.len(), nodes);
    for d in layout {
        let names: Vec<&str> = d.nodes.iter().map(|n| n.name.as_str()).collect();
        let _ = writeln!(out, "    {}: {}", d.name, names.join(", "));
    }
    let _ = writeln!(out, "  services:");
    for s in services {
        let _ = writeln!(
            out,
            "    {:<22} {:<19} {:<14} x{} {:<18} {}us",
            s.name,
            format!("{:?}", s.kind),
            format!("{:?}", s.failover),
            s.replicas,
            format!("{:?}", s.placement),
            s.processing.mean()
        );
    }
    out
}
