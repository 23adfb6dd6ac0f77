//! FX request model: arrivals, request records, the mainframe/cache data
//! access model and the monolith's static dependency references.

use serde::{Deserialize, Serialize};

use crate::ids::{NodeId, ReplicaId, RequestId};
use crate::sim_core::{Dist, RngStreams, SimTime};

pub const ARRIVALS_STREAM: &str = "arrivals";
pub const MIX_STREAM: &str = "workload_mix";
pub const CACHE_STREAM: &str = "cache";
pub const SERVICE_TIMES_STREAM: &str = "service_times";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Trade,
    LineCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    ExternalApi,
    ForexApi,
    RequestService,
    Auth,
    Trading,
    LineCheck,
    ForexData,
    Cache,
    Mainframe,
    Response,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestOutcome {
    Pending,
    Completed,
    Failed,
    ErrorQueued,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Cache,
    Mainframe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hop {
    pub stage: Stage,
    pub replica: Option<ReplicaId>,
    pub node: NodeId,
    pub at: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub kind: RequestKind,
    pub provider: u32,
    pub source: u32,
    pub created_at: SimTime,
    pub outcome: RequestOutcome,
    pub finished_at: Option<SimTime>,
    pub hops: Vec<Hop>,
    /// Total data-access latency charged to this request.
    pub data_access_us: u64,
}

impl Request {
    pub fn new(id: RequestId, kind: RequestKind, provider: u32, source: u32, created_at: SimTime) -> Self {
        Request {
            id,
            kind,
            provider,
            source,
            created_at,
            outcome: RequestOutcome::Pending,
            finished_at: None,
            hops: Vec::new(),
            data_access_us: 0,
        }
    }

    /// Appends a hop unless the stage was already reached (redelivered work
    /// does not repeat hops).
    pub fn add_hop(&mut self, hop: Hop) -> bool {
        if self.hops.iter().any(|h| h.stage == hop.stage) {
            return false;
        }
        self.hops.push(hop);
        true
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.hops.iter().map(|h| h.stage).collect()
    }

    pub fn latency_us(&self) -> Option<u64> {
        self.finished_at.map(|f| f - self.created_at)
    }
}

/// Arrival process for one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Arrivals {
    Constant { rate_per_s: f64 },
    Poisson { rate_per_s: f64 },
}

impl Arrivals {
    pub fn rate(&self) -> f64 {
        match self {
            Arrivals::Constant { rate_per_s } | Arrivals::Poisson { rate_per_s } => *rate_per_s,
        }
    }

    /// Time of the first arrival at or after `start`, or `None` for a zero rate.
    pub fn first(&self, rng: &mut RngStreams, start: SimTime) -> Option<SimTime> {
        match self {
            Arrivals::Constant { .. } => (self.rate() > 0.0).then_some(start),
            Arrivals::Poisson { .. } => self.next(rng, start, start, 0),
        }
    }

    /// Arrival following the `n`-th one (0-based), which happened at `prev`.
    /// Constant arrivals are placed by index from `start` so rounding never
    /// accumulates.
    pub fn next(&self, rng: &mut RngStreams, start: SimTime, prev: SimTime, n: u64) -> Option<SimTime> {
        let rate = self.rate();
        if rate <= 0.0 {
            return None;
        }
        match self {
            Arrivals::Constant { .. } => {
                let offset = ((n + 1) as f64 * 1e6 / rate).round() as u64;
                Some(start + offset)
            }
            Arrivals::Poisson { .. } => {
                let gap = rng
                    .draw(ARRIVALS_STREAM, &Dist::Exponential { mean: 1e6 / rate })
                    .expect("arrivals stream registered");
                Some(prev + gap.round().max(1.0) as u64)
            }
        }
    }
}

/// Data access for one request: cache hit with probability `hit_ratio`,
/// otherwise a mainframe call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MainframeModel {
    pub call_latency: Dist,
    pub hit_ratio: f64,
    pub hit_latency: Dist,
}

impl Default for MainframeModel {
    fn default() -> Self {
        MainframeModel {
            call_latency: Dist::Constant(20_000.0),
            hit_ratio: 0.8,
            hit_latency: Dist::Constant(1_000.0),
        }
    }
}

impl MainframeModel {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.hit_ratio) {
            p.push(format!("cache hit_ratio {} outside [0,1]", self.hit_ratio));
        }
        if !self.call_latency.is_strictly_positive() || !self.hit_latency.is_strictly_positive() {
            p.push("data access latencies must be strictly positive".to_string());
        }
        if self.hit_latency.mean() >= self.call_latency.mean() {
            p.push("cache hit latency must be below mainframe latency in expectation".to_string());
        }
        p
    }

    /// Monolith path: always the mainframe.
    pub fn mainframe(&self, rng: &mut RngStreams) -> u64 {
        rng.draw_us(CACHE_STREAM, &self.call_latency).expect("cache stream registered")
    }

    /// Cached path. Returns where the data came from and its latency.
    pub fn cached(&self, rng: &mut RngStreams) -> (DataSource, u64) {
        let hit = rng.chance(CACHE_STREAM, self.hit_ratio).expect("cache stream registered");
        if hit {
            let l = rng.draw_us(CACHE_STREAM, &self.hit_latency).expect("cache stream registered");
            (DataSource::Cache, l)
        } else {
            (DataSource::Mainframe, self.mainframe(rng))
        }
    }
}

/// Per-caller ordered dependency list with a cursor that only moves forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticRefTable {
    pub refs: Vec<ReplicaId>,
    pub index: usize,
}

impl StaticRefTable {
    /// Caller on host `pos` of `hosts`: the co-located instance first, then
    /// the following hosts in cyclic order.
    pub fn cyclic(deps_by_host: &[ReplicaId], pos: usize) -> Self {
        let n = deps_by_host.len();
        StaticRefTable {
            refs: (0..n).map(|i| deps_by_host[(pos + i) % n]).collect(),
            index: 0,
        }
    }

    pub fn current(&self) -> Option<ReplicaId> {
        self.refs.get(self.index).copied()
    }

    /// Moves to the next reference. The cursor stops past the end; it never
    /// wraps back to an earlier instance.
    pub fn advance(&mut self) -> Option<ReplicaId> {
        if self.index < self.refs.len() {
            self.index += 1;
        }
        self.current()
    }
}
