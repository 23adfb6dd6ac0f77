//! Run measurements: request outcomes, latency percentiles, availability,
//! duplicates, error-queue depth and traffic, plus paired-run comparison.
//!
//! Everything here is post-processing over a finished run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::discovery::Health;
use crate::error::SimError;
use crate::ids::{MessageId, ReplicaId, ServiceId};
use crate::orchestrator::ReplicaState;
use crate::sim_core::{Outcome, SimTime, Trace};
use crate::workload::{Request, RequestOutcome, Stage};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub replica: String,
    pub served: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceReport {
    pub name: String,
    pub requests_seen: u64,
    pub requests_completed: u64,
    pub requests_failed: u64,
    pub requests_error_queued: u64,
    pub availability: f64,
    pub served: u64,
    pub instances: Vec<InstanceReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub preset: String,
    pub seed: u64,
    pub horizon_us: u64,
    pub events: u64,
    pub requests_generated: u64,
    pub requests_completed: u64,
    pub requests_failed: u64,
    pub requests_error_queued: u64,
    pub requests_pending: u64,
    pub throughput_per_s: f64,
    pub latency_mean_us: f64,
    pub latency_p50_us: u64,
    pub latency_p95_us: u64,
    pub latency_p99_us: u64,
    /// Mean data-access (cache or mainframe) latency per completed request.
    pub data_access_mean_us: f64,
    /// Minimum structural availability over the services on the request path.
    pub availability: f64,
    /// Completed over generated-minus-pending.
    pub availability_requests: f64,
    /// Structural availability can lag a failure by up to this long.
    pub detection_window_us: u64,
    pub duplicate_deliveries: u64,
    pub error_queue_depth: u64,
    pub messages: u64,
    pub cross_dc_messages: u64,
    pub services: Vec<ServiceReport>,
    pub workload: serde_json::Value,
    pub faults: serde_json::Value,
    pub params: serde_json::Value,
}

/// Nearest-rank percentile of a sorted slice; 0 for an empty one.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Processings beyond the first per message id, broadcast copies excluded.
pub fn duplicate_count(trace: &Trace) -> u64 {
    let mut per: BTreeMap<MessageId, u64> = BTreeMap::new();
    for r in trace.records() {
        if let Outcome::Processed { msg, broadcast: false, .. } = r.outcome {
            *per.entry(msg).or_default() += 1;
        }
    }
    per.values().map(|c| c - 1).sum()
}

/// Fraction of `[0, horizon)` during which some replica of `service` was
/// Active and Healthy, reconstructed from the trace.
pub fn availability(trace: &Trace, service: ServiceId, horizon: SimTime) -> f64 {
    if horizon.as_micros() == 0 {
        return 1.0;
    }
    let mut state: BTreeMap<ReplicaId, ReplicaState> = BTreeMap::new();
    let mut health: BTreeMap<(ReplicaId, u32), Health> = BTreeMap::new();
    let up = |state: &BTreeMap<ReplicaId, ReplicaState>, health: &BTreeMap<(ReplicaId, u32), Health>| {
        state.iter().any(|(r, s)| {
            *s == ReplicaState::Active
                && health
                    .range((*r, 0)..=(*r, u32::MAX))
                    .any(|(_, h)| *h == Health::Healthy)
        })
    };
    let mut last = SimTime::ZERO;
    let mut was_up = false;
    let mut total = 0u64;
    for rec in trace.records() {
        if rec.time > horizon {
            break;
        }
        let touched = match rec.outcome {
            Outcome::ReplicaState { replica, to, .. } if replica.service == service => {
                state.insert(replica, to);
                true
            }
            Outcome::Health { replica, view, to, .. } if replica.service == service => {
                health.insert((replica, view), to);
                true
            }
            Outcome::Healed => {
                let mut merged: BTreeMap<(ReplicaId, u32), Health> = BTreeMap::new();
                for (&(r, _), &h) in &health {
                    let e = merged.entry((r, 0)).or_insert(h);
                    if h == Health::Healthy {
                        *e = Health::Healthy;
                    }
                }
                health = merged;
                true
            }
            _ => false,
        };
        if touched {
            if was_up {
                total += rec.time - last;
            }
            last = rec.time;
            was_up = up(&state, &health);
        }
    }
    if was_up {
        total += horizon - last;
    }
    total as f64 / horizon.as_micros() as f64
}

/// Requests served per replica for a pipeline stage, counting stage records
/// at or after `from`.
pub fn served_by_stage(trace: &Trace, stage: Stage, from: SimTime) -> BTreeMap<ReplicaId, u64> {
    let mut m = BTreeMap::new();
    for r in trace.records() {
        if r.time < from {
            continue;
        }
        if let Outcome::Stage { stage: s, replica, .. } = r.outcome {
            if s == stage {
                *m.entry(replica).or_default() += 1;
            }
        }
    }
    m
}

/// Request outcome counts and latency statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RequestStats {
    pub generated: u64,
    pub completed: u64,
    pub failed: u64,
    pub error_queued: u64,
    pub pending: u64,
    pub latencies: Vec<u64>,
    pub data_access_total: u64,
}

impl RequestStats {
    pub fn of(requests: &[Request]) -> Self {
        let mut s = RequestStats {
            generated: requests.len() as u64,
            ..Default::default()
        };
        for r in requests {
            match r.outcome {
                RequestOutcome::Completed => {
                    s.completed += 1;
                    s.latencies.push(r.latency_us().unwrap_or(0));
                    s.data_access_total += r.data_access_us;
                }
                RequestOutcome::Failed => s.failed += 1,
                RequestOutcome::ErrorQueued => s.error_queued += 1,
                RequestOutcome::Pending => s.pending += 1,
            }
        }
        s.latencies.sort_unstable();
        s
    }

    pub fn success_rate(&self) -> f64 {
        let decided = self.generated - self.pending;
        if decided == 0 {
            1.0
        } else {
            self.completed as f64 / decided as f64
        }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Aligned two-column text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("scenario", self.scenario.clone()),
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("horizon_us", self.horizon_us.to_string()),
            ("events", self.events.to_string()),
            ("requests_generated", self.requests_generated.to_string()),
            ("requests_completed", self.requests_completed.to_string()),
            ("requests_failed", self.requests_failed.to_string()),
            ("requests_error_queued", self.requests_error_queued.to_string()),
            ("requests_pending", self.requests_pending.to_string()),
            ("throughput_per_s", format!("{:.3}", self.throughput_per_s)),
            ("latency_mean_us", format!("{:.1}", self.latency_mean_us)),
            ("latency_p50_us", self.latency_p50_us.to_string()),
            ("latency_p95_us", self.latency_p95_us.to_string()),
            ("latency_p99_us", self.latency_p99_us.to_string()),
            ("data_access_mean_us", format!("{:.1}", self.data_access_mean_us)),
            ("availability", format!("{:.6}", self.availability)),
            ("availability_requests", format!("{:.6}", self.availability_requests)),
            ("detection_window_us", self.detection_window_us.to_string()),
            ("duplicate_deliveries", self.duplicate_deliveries.to_string()),
            ("error_queue_depth", self.error_queue_depth.to_string()),
            ("messages", self.messages.to_string()),
            ("cross_dc_messages", self.cross_dc_messages.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<24} {v}");
        }
        let _ = writeln!(out, "\n{:<24} {:>8} {:>9} {:>8} {:>8} {:>12}", "service", "seen", "completed", "failed", "served", "availability");
        for s in &self.services {
            let _ = writeln!(
                out,
                "{:<24} {:>8} {:>9} {:>8} {:>8} {:>12.6}",
                s.name, s.requests_seen, s.requests_completed, s.requests_failed, s.served, s.availability
            );
        }
        out
    }

    fn numeric_fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("requests_generated", self.requests_generated as f64),
            ("requests_completed", self.requests_completed as f64),
            ("requests_failed", self.requests_failed as f64),
            ("requests_error_queued", self.requests_error_queued as f64),
            ("requests_pending", self.requests_pending as f64),
            ("throughput_per_s", self.throughput_per_s),
            ("latency_mean_us", self.latency_mean_us),
            ("latency_p50_us", self.latency_p50_us as f64),
            ("latency_p95_us", self.latency_p95_us as f64),
            ("latency_p99_us", self.latency_p99_us as f64),
            ("data_access_mean_us", self.data_access_mean_us),
            ("availability", self.availability),
            ("availability_requests", self.availability_requests),
            ("duplicate_deliveries", self.duplicate_deliveries as f64),
            ("error_queue_depth", self.error_queue_depth as f64),
            ("messages", self.messages as f64),
            ("cross_dc_messages", self.cross_dc_messages as f64),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `delta / a`; absent when `a` is zero.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub a: String,
    pub b: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>16} {:>16} {:>16} {:>10}", "metric", self.a, self.b, "delta", "relative");
        for r in &self.rows {
            let rel = r.relative.map(|x| format!("{:+.4}", x)).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<24} {:>16.4} {:>16.4} {:>+16.4} {:>10}", r.metric, r.a, r.b, r.delta, rel);
        }
        out
    }
}

/// Side-by-side metrics of two runs of the same workload, faults and seed.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<ComparisonTable, SimError> {
    if a.seed != b.seed {
        return Err(SimError::MismatchedScenario(format!("seeds {} and {}", a.seed, b.seed)));
    }
    if a.workload != b.workload {
        return Err(SimError::MismatchedScenario("workloads differ".into()));
    }
    if a.faults != b.faults {
        return Err(SimError::MismatchedScenario("fault schedules differ".into()));
    }
    if a.horizon_us != b.horizon_us {
        return Err(SimError::MismatchedScenario("horizons differ".into()));
    }
    let rows = a
        .numeric_fields()
        .into_iter()
        .zip(b.numeric_fields())
        .map(|((name, x), (_, y))| ComparisonRow {
            metric: name.to_string(),
            a: x,
            b: y,
            delta: y - x,
            relative: (x != 0.0).then(|| (y - x) / x),
        })
        .collect();
    Ok(ComparisonTable {
        a: a.preset.to_string(),
        b: b.preset.to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{EntityId, Names, QueueId};
    use crate::sim_core::EventKind;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 95.0), 95);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
        assert_eq!(percentile(&[1, 2, 3], 50.0), 2);
    }

    fn processed(t: &mut Trace, msg: u64, broadcast: bool) {
        let consumer = ReplicaId::new(ServiceId(0), 0);
        t.push(
            SimTime(1),
            EntityId::Broker,
            EventKind::ProcessingDone,
            Outcome::Processed { msg: MessageId(msg), queue: QueueId(1), consumer, broadcast },
        );
    }

    #[test]
    fn duplicates_skip_broadcast() {
        let mut t = Trace::new(Names::default());
        processed(&mut t, 0, false);
        processed(&mut t, 1, false);
        assert_eq!(duplicate_count(&t), 0);
        processed(&mut t, 1, false);
        processed(&mut t, 2, true);
        processed(&mut t, 2, true);
        assert_eq!(duplicate_count(&t), 1);
    }

    fn state(t: &mut Trace, at: u64, i: u32, from: ReplicaState, to: ReplicaState) {
        let replica = ReplicaId::new(ServiceId(0), i);
        t.push(
            SimTime(at),
            EntityId::Replica(replica),
            EventKind::FaultAction,
            Outcome::ReplicaState { replica, node: crate::ids::NodeId(0), from, to },
        );
    }

    fn health(t: &mut Trace, at: u64, i: u32, from: Health, to: Health) {
        let replica = ReplicaId::new(ServiceId(0), i);
        t.push(SimTime(at), EntityId::Replica(replica), EventKind::HealthProbe, Outcome::Health { replica, view: 0, from, to });
    }

    #[test]
    fn availability_interval_arithmetic() {
        use ReplicaState::*;
        let mut t = Trace::new(Names::default());
        state(&mut t, 0, 0, Starting, Active);
        health(&mut t, 0, 0, Health::Suspect, Health::Healthy);
        state(&mut t, 50, 0, Active, Failed);
        state(&mut t, 60, 0, Failed, Active);
        let a = availability(&t, ServiceId(0), SimTime(100));
        assert!((a - 0.9).abs() < 1e-12, "{a}");
        assert_eq!(availability(&t, ServiceId(1), SimTime(100)), 0.0);
    }

    #[test]
    fn compare_identical_and_mismatched() {
        let r = MetricsReport { seed: 3, requests_completed: 10, ..Default::default() };
        let t = compare(&r, &r).unwrap();
        assert!(t.rows.iter().all(|row| row.delta == 0.0));
        let other = MetricsReport { seed: 4, ..r.clone() };
        assert!(matches!(compare(&r, &other), Err(SimError::MismatchedScenario(_))));
    }
}
