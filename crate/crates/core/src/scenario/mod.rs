//! Scenario files: schema, validation with source positions, preset
//! materialization and re-emission.

mod span;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use span::{Pos, SpanIndex};

use crate::bus::{BusConfig, QueueMode};
use crate::discovery::{HealthProbeConfig, Policy};
use crate::orchestrator::{Behavior, Failover, FailoverTimings, Forward, Placement, Role, ServiceKind, ServiceSpec};
use crate::presets::{self, BusDecl, DcDecl, PresetKind};
use crate::sim_core::{Dist, SimTime};
use crate::topology::{LatencyModel, NodeStatus};
use crate::workload::{Arrivals, MainframeModel, RequestKind};

pub const SCHEMA: &str = "fxsim/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheParams {
    pub hit_ratio: f64,
    pub hit_latency: Dist,
}

impl Default for CacheParams {
    fn default() -> Self {
        let m = MainframeModel::default();
        CacheParams {
            hit_ratio: m.hit_ratio,
            hit_latency: m.hit_latency,
        }
    }
}

/// Tunables shared by every module. All fields have defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub latency: LatencyModel,
    pub probe: HealthProbeConfig,
    pub bus: BusConfig,
    pub failover: FailoverTimings,
    pub cache: CacheParams,
    /// A request not completed this long after creation counts as Failed.
    pub request_timeout_us: u64,
    /// Replaces every node's capacity when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_capacity: Option<u32>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            latency: LatencyModel::default(),
            probe: HealthProbeConfig::default(),
            bus: BusConfig::default(),
            failover: FailoverTimings::default(),
            cache: CacheParams::default(),
            request_timeout_us: 10_000_000,
            node_capacity: None,
        }
    }
}

impl Params {
    pub fn mainframe(&self) -> MainframeModel {
        MainframeModel {
            call_latency: self.latency.mainframe_call.clone(),
            hit_ratio: self.cache.hit_ratio,
            hit_latency: self.cache.hit_latency.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDecl {
    pub datacenters: Vec<DcDecl>,
}

/// A service declaration. For presets only `name` is required and the other
/// fields override the preset's values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ServiceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failover: Option<Failover>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processing: Option<Dist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward: Option<Forward>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Behavior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_nodes: Option<Vec<String>>,
}

impl ServiceDecl {
    fn apply(&self, s: &mut ServiceSpec) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { s.$f = v.clone(); } )* };
        }
        set!(kind, failover, replicas, placement, processing, version, role, consumes, behavior, policy, pinned_nodes);
        if self.forward.is_some() {
            s.forward = self.forward.clone();
        }
    }

    fn fresh(&self) -> ServiceSpec {
        let mut s = ServiceSpec {
            name: self.name.clone(),
            kind: ServiceKind::Business,
            failover: Failover::ActiveActive,
            replicas: 1,
            placement: Placement::Spread,
            processing: Dist::constant_us(presets::STAGE_US),
            version: 1,
            role: Role::Custom,
            consumes: Vec::new(),
            forward: None,
            behavior: Behavior::Normal,
            policy: Policy::RoundRobin,
            pinned_nodes: Vec::new(),
        };
        self.apply(&mut s);
        s
    }
}

/// Custom-preset request source: publishes straight to an exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDecl {
    pub from_node: String,
    pub exchange: String,
    pub routing_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrivals: Option<Arrivals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadDecl {
    pub arrivals: Arrivals,
    pub start_us: u64,
    /// Defaults to the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_us: Option<u64>,
    pub trade_fraction: f64,
    pub providers: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceDecl>,
}

impl Default for WorkloadDecl {
    fn default() -> Self {
        WorkloadDecl {
            arrivals: Arrivals::Constant { rate_per_s: 0.0 },
            start_us: 0,
            end_us: None,
            trade_fraction: 0.5,
            providers: 1,
            sources: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultAction {
    KillNode {
        node: String,
    },
    RestoreNode {
        node: String,
    },
    KillReplica {
        service: String,
        index: u32,
    },
    Partition {
        groups: Vec<Vec<String>>,
    },
    Heal,
    RollingUpdate {
        service: String,
        version: u32,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        faulty: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub at_us: u64,
    #[serde(flatten)]
    pub action: FaultAction,
}

fn default_schema() -> String {
    SCHEMA.to_string()
}

fn default_seed() -> u64 {
    1
}

/// The on-disk scenario document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "default_schema")]
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub preset: PresetKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub horizon_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyDecl>,
    #[serde(default)]
    pub params: Params,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub services: Vec<ServiceDecl>,
    #[serde(default)]
    pub bus: BusDecl,
    #[serde(default)]
    pub workload: WorkloadDecl,
    #[serde(default)]
    pub faults: Vec<FaultEntry>,
}

impl ScenarioFile {
    pub fn new(preset: PresetKind, horizon_us: u64) -> Self {
        ScenarioFile {
            schema: default_schema(),
            name: String::new(),
            preset,
            seed: 1,
            horizon_us,
            topology: None,
            params: Params::default(),
            services: Vec::new(),
            bus: BusDecl::default(),
            workload: WorkloadDecl::default(),
            faults: Vec::new(),
        }
    }
}

/// A validated scenario with its preset expanded.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub name: String,
    pub preset: PresetKind,
    pub seed: u64,
    pub horizon: SimTime,
    pub layout: Vec<DcDecl>,
    pub params: Params,
    pub services: Vec<ServiceSpec>,
    pub bus: BusDecl,
    pub workload: WorkloadDecl,
    pub faults: Vec<FaultEntry>,
    pub auto_restart: bool,
}

impl Scenario {
    pub fn from_file(file: ScenarioFile) -> Result<Scenario, ValidationErrors> {
        materialize(file, None)
    }

    /// Same scenario under another seed.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut s = self.clone();
        s.seed = seed;
        s.file.seed = seed;
        s
    }

    pub fn node_names(&self) -> Vec<String> {
        self.layout.iter().flat_map(|d| d.nodes.iter().map(|n| n.name.clone())).collect()
    }

    pub fn describe(&self) -> String {
        presets::describe(self.preset, &self.services, &self.layout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ErrorKind {
    ParseError,
    UnknownEntity,
    UnsortedSchedule,
    InvalidPartitionSequence,
    InvalidValue,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationError {
    pub kind: ErrorKind,
    pub pointer: String,
    pub pos: Option<Pos>,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pos {
            Some(p) => write!(f, "{}:{}: {:?}: {}", p.line, p.col, self.kind, self.message),
            None => write!(f, "{}: {:?}: {}", self.pointer, self.kind, self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl ValidationErrors {
    pub fn kinds(&self) -> Vec<ErrorKind> {
        self.0.iter().map(|e| e.kind).collect()
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

struct Errs<'a> {
    list: Vec<ValidationError>,
    spans: Option<&'a SpanIndex>,
}

impl Errs<'_> {
    fn push(&mut self, kind: ErrorKind, pointer: impl Into<String>, message: impl Into<String>) {
        let pointer = pointer.into();
        let pos = self.spans.map(|s| s.locate(&pointer));
        self.list.push(ValidationError {
            kind,
            pointer,
            pos,
            message: message.into(),
        });
    }
}

/// Parses and validates scenario text, reporting every semantic problem at once.
pub fn validate(text: &str) -> Result<Scenario, ValidationErrors> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| {
        ValidationErrors(vec![ValidationError {
            kind: ErrorKind::ParseError,
            pointer: String::new(),
            pos: Some(Pos {
                line: e.line(),
                col: e.column(),
            }),
            message: e.to_string(),
        }])
    })?;
    let spans = SpanIndex::build(text);
    materialize(file, Some(&spans))
}

/// Serializes a scenario back to its document form.
pub fn emit(s: &Scenario) -> String {
    serde_json::to_string_pretty(&s.file).expect("scenario documents always serialize")
}

fn materialize(file: ScenarioFile, spans: Option<&SpanIndex>) -> Result<Scenario, ValidationErrors> {
    use ErrorKind::*;
    let mut e = Errs { list: Vec::new(), spans };
    if file.schema != SCHEMA {
        e.push(InvalidValue, "/schema", format!("unsupported schema `{}`, expected `{SCHEMA}`", file.schema));
    }
    if file.horizon_us == 0 {
        e.push(InvalidValue, "/horizon_us", "horizon must be positive");
    }
    let parts = presets::parts(file.preset);
    let mut layout = match &file.topology {
        Some(t) => t.datacenters.clone(),
        None => parts.layout.clone(),
    };
    if layout.is_empty() {
        e.push(InvalidValue, "/topology", "the topology needs at least one datacenter");
    }
    if let Some(c) = file.params.node_capacity {
        if c == 0 {
            e.push(InvalidValue, "/params/node_capacity", "capacity must be positive");
        }
        for n in layout.iter_mut().flat_map(|d| d.nodes.iter_mut()) {
            n.capacity = c;
        }
    }
    let mut dc_names = BTreeSet::new();
    let mut node_names = BTreeSet::new();
    for (di, d) in layout.iter().enumerate() {
        if !dc_names.insert(d.name.clone()) {
            e.push(InvalidValue, format!("/topology/datacenters/{di}/name"), format!("duplicate datacenter `{}`", d.name));
        }
        if d.nodes.is_empty() {
            e.push(InvalidValue, format!("/topology/datacenters/{di}/nodes"), format!("datacenter `{}` has no nodes", d.name));
        }
        for (ni, n) in d.nodes.iter().enumerate() {
            let at = format!("/topology/datacenters/{di}/nodes/{ni}");
            if !node_names.insert(n.name.clone()) {
                e.push(InvalidValue, format!("{at}/name"), format!("duplicate node `{}`", n.name));
            }
            if n.capacity == 0 {
                e.push(InvalidValue, format!("{at}/capacity"), "capacity must be positive");
            }
        }
    }

    let p = &file.params;
    for m in p.latency.problems() {
        e.push(InvalidValue, "/params/latency", m);
    }
    for m in p.probe.problems() {
        e.push(InvalidValue, "/params/probe", m);
    }
    for m in p.mainframe().problems() {
        e.push(InvalidValue, "/params/cache", m);
    }
    if p.bus.ack_timeout_us == 0 {
        e.push(InvalidValue, "/params/bus/ack_timeout_us", "ack timeout must be positive");
    }
    if p.request_timeout_us == 0 {
        e.push(InvalidValue, "/params/request_timeout_us", "request timeout must be positive");
    }
    if p.failover.poll_us == 0 {
        e.push(InvalidValue, "/params/failover/poll_us", "poll interval must be positive");
    }

    let mut bus = parts.bus.clone();
    bus.extend(&file.bus);
    let mut modes: BTreeMap<&str, QueueMode> = BTreeMap::new();
    for q in parts.bus.queues.iter() {
        modes.insert(&q.name, q.mode);
    }
    for (i, q) in file.bus.queues.iter().enumerate() {
        if q.name.is_empty() || q.name == crate::bus::ERROR_QUEUE {
            e.push(InvalidValue, format!("/bus/queues/{i}/name"), format!("queue name `{}` is reserved or empty", q.name));
        }
        match modes.get(q.name.as_str()) {
            Some(m) if *m != q.mode => {
                e.push(InvalidValue, format!("/bus/queues/{i}/mode"), format!("queue `{}` redeclared with another mode", q.name))
            }
            _ => {
                modes.insert(&q.name, q.mode);
            }
        }
    }
    let exchanges: BTreeSet<&str> = bus.exchanges.iter().map(String::as_str).collect();
    for (i, x) in file.bus.exchanges.iter().enumerate() {
        if x.is_empty() {
            e.push(InvalidValue, format!("/bus/exchanges/{i}"), "exchange name must not be empty");
        }
    }
    for (i, b) in file.bus.bindings.iter().enumerate() {
        if !exchanges.contains(b.exchange.as_str()) {
            e.push(UnknownEntity, format!("/bus/bindings/{i}/exchange"), format!("unknown exchange `{}`", b.exchange));
        }
        if !modes.contains_key(b.queue.as_str()) {
            e.push(UnknownEntity, format!("/bus/bindings/{i}/queue"), format!("unknown queue `{}`", b.queue));
        }
    }

    let mut services = parts.services.clone();
    for (i, d) in file.services.iter().enumerate() {
        match services.iter_mut().find(|s| s.name == d.name) {
            Some(s) if file.preset != PresetKind::Custom => d.apply(s),
            Some(_) => e.push(InvalidValue, format!("/services/{i}/name"), format!("duplicate service `{}`", d.name)),
            None if file.preset == PresetKind::Custom => services.push(d.fresh()),
            None => e.push(
                UnknownEntity,
                format!("/services/{i}/name"),
                format!("preset {} has no service `{}`", file.preset.as_str(), d.name),
            ),
        }
    }
    for (si, s) in services.iter().enumerate() {
        let at = file
            .services
            .iter()
            .position(|d| d.name == s.name)
            .map(|i| format!("/services/{i}"))
            .unwrap_or_else(|| format!("/services/{si}"));
        if s.name.is_empty() {
            e.push(InvalidValue, format!("{at}/name"), "service name must not be empty");
        }
        for m in s.problems() {
            e.push(InvalidValue, at.clone(), m);
        }
        for (qi, q) in s.consumes.iter().enumerate() {
            if !modes.contains_key(q.as_str()) {
                e.push(UnknownEntity, format!("{at}/consumes/{qi}"), format!("unknown queue `{q}`"));
            }
        }
        if let Some(f) = &s.forward {
            if !exchanges.contains(f.exchange.as_str()) {
                e.push(UnknownEntity, format!("{at}/forward/exchange"), format!("unknown exchange `{}`", f.exchange));
            }
        }
        for (ni, n) in s.pinned_nodes.iter().enumerate() {
            if !node_names.contains(n) {
                e.push(UnknownEntity, format!("{at}/pinned_nodes/{ni}"), format!("unknown node `{n}`"));
            }
        }
    }

    let w = &file.workload;
    let mut workload = w.clone();
    let rate_ok = |a: &Arrivals| a.rate().is_finite() && a.rate() >= 0.0;
    if !rate_ok(&w.arrivals) {
        e.push(InvalidValue, "/workload/arrivals", "arrival rate must be finite and non-negative");
    }
    if !(0.0..=1.0).contains(&w.trade_fraction) {
        e.push(InvalidValue, "/workload/trade_fraction", "trade_fraction must lie in [0,1]");
    }
    if w.providers == 0 {
        e.push(InvalidValue, "/workload/providers", "providers must be at least 1");
    }
    let end = w.end_us.unwrap_or(file.horizon_us);
    if end < w.start_us {
        e.push(InvalidValue, "/workload/end_us", "workload ends before it starts");
    }
    workload.end_us = Some(end.min(file.horizon_us));
    if file.preset != PresetKind::Custom && !w.sources.is_empty() {
        e.push(InvalidValue, "/workload/sources", "explicit sources are only allowed with the custom preset");
    }
    for (i, s) in w.sources.iter().enumerate() {
        let at = format!("/workload/sources/{i}");
        if !node_names.contains(&s.from_node) {
            e.push(UnknownEntity, format!("{at}/from_node"), format!("unknown node `{}`", s.from_node));
        }
        if !exchanges.contains(s.exchange.as_str()) {
            e.push(UnknownEntity, format!("{at}/exchange"), format!("unknown exchange `{}`", s.exchange));
        }
        if let Some(a) = &s.arrivals {
            if !rate_ok(a) {
                e.push(InvalidValue, format!("{at}/arrivals"), "arrival rate must be finite and non-negative");
            }
        }
    }

    let mut last = 0;
    let mut partitioned = false;
    let mut down: BTreeSet<String> = layout
        .iter()
        .flat_map(|d| d.nodes.iter())
        .filter(|n| n.status == NodeStatus::Down)
        .map(|n| n.name.clone())
        .collect();
    for (i, f) in file.faults.iter().enumerate() {
        let at = format!("/faults/{i}");
        if f.at_us < last {
            e.push(UnsortedSchedule, format!("{at}/at_us"), format!("fault at {}us comes after one at {last}us", f.at_us));
        }
        last = last.max(f.at_us);
        let node_ok = |n: &str, e: &mut Errs| {
            if !node_names.contains(n) {
                e.push(UnknownEntity, format!("{at}/node"), format!("unknown node `{n}`"));
                false
            } else {
                true
            }
        };
        match &f.action {
            FaultAction::KillNode { node } => {
                if node_ok(node, &mut e) {
                    down.insert(node.clone());
                }
            }
            FaultAction::RestoreNode { node } => {
                if node_ok(node, &mut e) {
                    down.remove(node);
                }
            }
            FaultAction::KillReplica { service, index } => match services.iter().find(|s| &s.name == service) {
                None => e.push(UnknownEntity, format!("{at}/service"), format!("unknown service `{service}`")),
                Some(s) if *index >= s.replicas => e.push(
                    UnknownEntity,
                    format!("{at}/index"),
                    format!("service `{service}` has no replica {index}"),
                ),
                _ => {}
            },
            FaultAction::RollingUpdate { service, .. } => {
                if !services.iter().any(|s| &s.name == service) {
                    e.push(UnknownEntity, format!("{at}/service"), format!("unknown service `{service}`"));
                }
            }
            FaultAction::Partition { groups } => {
                if partitioned {
                    e.push(InvalidPartitionSequence, format!("{at}/action"), "partition while already partitioned");
                }
                partitioned = true;
                let mut seen = BTreeSet::new();
                for (gi, g) in groups.iter().enumerate() {
                    for (ni, n) in g.iter().enumerate() {
                        if !node_names.contains(n) {
                            e.push(UnknownEntity, format!("{at}/groups/{gi}/{ni}"), format!("unknown node `{n}`"));
                        } else if !seen.insert(n.clone()) {
                            e.push(InvalidValue, format!("{at}/groups/{gi}/{ni}"), format!("node `{n}` is in two groups"));
                        }
                    }
                }
                let nonempty = groups.iter().filter(|g| !g.is_empty()).count();
                if nonempty < 2 {
                    e.push(InvalidValue, format!("{at}/groups"), "a partition needs at least two non-empty groups");
                }
                for n in &node_names {
                    if !down.contains(n) && !seen.contains(n) {
                        e.push(InvalidValue, format!("{at}/groups"), format!("up node `{n}` is in no group"));
                    }
                }
            }
            FaultAction::Heal => {
                if !partitioned {
                    e.push(InvalidPartitionSequence, format!("{at}/action"), "heal without an active partition");
                }
                partitioned = false;
            }
        }
    }

    if !e.list.is_empty() {
        return Err(ValidationErrors(e.list));
    }
    Ok(Scenario {
        name: file.name.clone(),
        preset: file.preset,
        seed: file.seed,
        horizon: SimTime(file.horizon_us),
        layout,
        params: file.params.clone(),
        services,
        bus,
        workload,
        faults: file.faults.clone(),
        auto_restart: parts.auto_restart,
        file,
    })
}
