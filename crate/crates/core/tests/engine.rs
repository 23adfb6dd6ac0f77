mod common;

use std::collections::BTreeSet;

use common::*;
use fxsim_core::orchestrator::{active_intervals, overlapping_actives, Failover};
use fxsim_core::sim_core::Outcome;
use fxsim_core::workload::RequestOutcome;
use fxsim_core::{run, validate, RunError};
use proptest::prelude::*;
use serde_json::{json, Value};

#[test]
fn report_counters_partition_generated_requests() {
    let o = run_ok(&scenario(&preset("counts", "microservice", 4, 20, 60.0)));
    let r = &o.report;
    assert_eq!(
        r.requests_generated,
        r.requests_completed + r.requests_failed + r.requests_error_queued + r.requests_pending
    );
    assert_eq!(r.requests_generated as usize, o.requests.len());
    let completed = o.requests.iter().filter(|q| q.outcome == RequestOutcome::Completed).count();
    assert_eq!(completed as u64, r.requests_completed);
}

#[test]
fn seed_override_changes_the_run() {
    let s = scenario(&preset("seeded", "monolith", 1, 10, 50.0));
    let a = run_ok(&s);
    let b = run_ok(&s.with_seed(2));
    assert_ne!(a.trace.export_text(), b.trace.export_text());
    assert_eq!(b.report.seed, 2);
}

#[test]
fn trace_times_never_decrease() {
    let mut v = preset("monotone", "microservice", 8, 20, 80.0);
    v["faults"] = json!([kill(5.0, "n2"), restore(9.0, "n2")]);
    let o = run_ok(&scenario(&v));
    assert!(o.trace.records().windows(2).all(|w| w[0].time <= w[1].time));
}

#[test]
fn killed_host_stops_serving_until_restored() {
    let mut v = preset("outage", "microservice", 12, 30, 80.0);
    v["faults"] = json!([kill(5.0, "n4"), restore(15.0, "n4")]);
    let s = scenario(&v);
    let o = run_ok(&s);
    let n4 = s.node_names().iter().position(|n| n == "n4").unwrap() as u32;
    // work stuck on the host before the kill may still report shortly after
    let (from, to) = (6 * S, 15 * S);
    for r in o.trace.records() {
        if let Outcome::Stage { replica, .. } = r.outcome {
            let t = r.time.as_micros();
            if t > from && t < to {
                assert_ne!(o.orchestrator.replica(replica).node.0, n4, "stage served on a dead host at {t}");
            }
        }
    }
}

#[test]
fn short_timeout_fails_slow_requests() {
    let mut v = preset("slow", "monolith", 3, 10, 20.0);
    v["params"] = json!({ "request_timeout_us": 1000 });
    let o = run_ok(&scenario(&v));
    assert_eq!(o.report.requests_completed, 0);
    assert!(o.report.requests_failed > 0);
}

#[test]
fn validation_errors_surface_through_run_error() {
    let err = validate(r#"{"schema":"fxsim/1","name":"x","preset":"nope"}"#).unwrap_err();
    let as_run: RunError = err.into();
    assert!(matches!(as_run, RunError::Validation(_)));
}

#[test]
fn detection_window_is_reported() {
    let s = scenario(&preset("window", "microservice", 1, 5, 10.0));
    let o = run(&s).unwrap();
    let p = &s.params;
    assert_eq!(
        o.report.detection_window_us,
        p.probe.interval_us * p.probe.failure_threshold as u64 + p.failover.takeover_delay_us
    );
}

fn fault_schedule(events: &[(u64, u8, usize)], hosts: &[&str], replicas: usize) -> Value {
    let v: Vec<Value> = events
        .iter()
        .map(|&(at_ms, what, h)| {
            let node = hosts[h % hosts.len()];
            let at_us = at_ms * 1000;
            match what % 3 {
                0 => json!({ "at_us": at_us, "action": "kill_node", "node": node }),
                1 => json!({ "at_us": at_us, "action": "restore_node", "node": node }),
                _ => json!({ "at_us": at_us, "action": "kill_replica", "service": "Worker", "index": h % replicas }),
            }
        })
        .collect();
    Value::Array(v)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Under arbitrary worker-host faults every published message is
    /// eventually acked or error-queued, and an identical rerun matches.
    #[test]
    fn workers_under_faults_lose_nothing(
        workers in 1u32..4,
        messages in 1u64..200,
        faults in proptest::collection::vec((1u64..20_000, 0u8..3, 0usize..3), 0..6),
        never_ack in proptest::bool::weighted(0.2),
    ) {
        let mut v = custom_pipeline("prop", 4, workers, messages, json!({}));
        // keep the broker host alive so its queues survive
        let mut f = faults.clone();
        f.sort();
        v["faults"] = fault_schedule(&f, &["h1", "h2", "h3"], workers as usize);
        v["services"][1]["pinned_nodes"] = json!((0..workers).map(|i| format!("h{}", i + 1)).collect::<Vec<_>>());
        if never_ack {
            v["services"][1]["behavior"] = json!("never_ack");
        }
        // restore every host at the end so nothing waits forever
        for h in ["h1", "h2", "h3"] {
            v["faults"].as_array_mut().unwrap().push(json!({ "at_us": 25 * S, "action": "restore_node", "node": h }));
        }
        let s = scenario(&v);
        let o = run_ok(&s);
        let ledger = o.broker.ledger();
        prop_assert!(ledger.pending.is_empty(), "pending {:?}", ledger.pending);
        let settled: BTreeSet<_> = ledger.acked.union(&ledger.error_queued).copied().collect();
        prop_assert_eq!(&settled, &ledger.published);
        prop_assert_eq!(ledger.published.len() as u64, messages);
        let again = run_ok(&s);
        prop_assert_eq!(o.trace.export_text(), again.trace.export_text());
    }

    /// Active/passive services never have two Active holders, whatever the
    /// kill and restore schedule.
    #[test]
    fn active_passive_never_overlaps(
        seed in 0u64..1000,
        faults in proptest::collection::vec((500u64..14_000, 0u8..2, 0usize..3), 0..6),
    ) {
        let mut f = faults.clone();
        f.sort();
        let mut v = preset("ap", "monolith", seed, 15, 10.0);
        v["faults"] = fault_schedule(&f, &["n1", "n2", "n3"], 1);
        let s = scenario(&v);
        let o = run_ok(&s);
        let iv = active_intervals(&o.trace, s.horizon);
        for (i, spec) in s.services.iter().enumerate() {
            if spec.failover == Failover::ActivePassive {
                prop_assert_eq!(overlapping_actives(&iv, fxsim_core::ids::ServiceId(i as u32)), 0);
            }
        }
    }
}

/// Kill at 50.5s: probes at 51s and 52s miss, so the holder is declared
/// Unhealthy at 52s and the passive takes over 2s later.
#[test]
fn passive_takes_over_after_detection_plus_delay() {
    let mut v = preset("takeover", "monolith", 5, 60, 5.0);
    let s0 = scenario(&v);
    let o0 = run_ok(&s0);
    let api = s0.services.iter().position(|x| x.name == "ExternalAPI").unwrap() as u32;
    let holder = o0
        .trace
        .records()
        .iter()
        .find_map(|r| match r.outcome {
            Outcome::LeaseGranted { replica } if replica.service.0 == api => Some(replica),
            _ => None,
        })
        .unwrap();
    let node = &s0.node_names()[o0.orchestrator.replica(holder).node.0 as usize];
    v["faults"] = json!([kill(50.5, node)]);
    let s = scenario(&v);
    let o = run_ok(&s);
    let activated: Vec<u64> = o
        .trace
        .records()
        .iter()
        .filter_map(|r| match r.outcome {
            Outcome::ReplicaState { replica, to: fxsim_core::orchestrator::ReplicaState::Active, .. }
                if replica.service.0 == api && replica != holder && r.time.as_micros() > 0 =>
            {
                Some(r.time.as_micros())
            }
            _ => None,
        })
        .collect();
    assert_eq!(activated.first().copied(), Some(54 * S), "{activated:?}");
}

#[test]
fn empty_workload_is_fully_available() {
    for p in ["monolith", "microservice"] {
        let mut v = preset("idle", p, 1, 10, 10.0);
        v["workload"]["end_us"] = json!(0);
        let o = run_ok(&scenario(&v));
        assert_eq!(o.report.requests_generated, 0);
        assert_eq!(o.report.availability, 1.0);
        assert_eq!(o.report.availability_requests, 1.0);
    }
}
