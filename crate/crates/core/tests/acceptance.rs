//! Acceptance suite: one line per criterion, non-zero exit on any failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::*;
use fxsim_core::bus::{ErrorReason, QueueMode};
use fxsim_core::discovery::{Health, HealthProbeConfig, Policy, Registry};
use fxsim_core::ids::{EntityId, MessageId, Names, NodeId, QueueId, ReplicaId, RequestId, ServiceId};
use fxsim_core::metrics::{duplicate_count, served_by_stage};
use fxsim_core::orchestrator::{active_intervals, overlapping_actives, ReplicaState};
use fxsim_core::sim_core::{EventKind, Kernel, Outcome, SimTime};
use fxsim_core::topology::{LatencyModel, NodeStatus, Topology};
use fxsim_core::workload::{RequestKind, RequestOutcome, Stage};
use fxsim_core::{RunOutput, Scenario};

const MICRO_NODES: [&str; 5] = ["n1", "n2", "n3", "n4", "n5"];
const MONO_NODES: [&str; 3] = ["n1", "n2", "n3"];

/// Random but valid scenario: fault episodes never overlap, every outage is
/// repaired, and load stops well before the horizon so work can drain.
fn random_scenario(i: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D + i);
    let micro = i % 2 == 1;
    let rate = rng.random_range(20.0..80.0);
    let mut v = preset(&format!("random-{i}"), if micro { "microservice" } else { "monolith" }, 100 + i, 30, rate);
    if rng.random_bool(0.5) {
        v["workload"]["arrivals"] = json!({ "type": "constant", "rate_per_s": rate });
    }
    v["workload"]["end_us"] = json!(18 * S);
    let nodes: &[&str] = if micro { &MICRO_NODES } else { &MONO_NODES };
    let mut faults = Vec::new();
    let mut t = rng.random_range(1.0..3.0);
    for _ in 0..rng.random_range(0..=3) {
        let d = rng.random_range(2.0..4.0);
        if t + d > 15.0 {
            break;
        }
        let at = |x: f64| (x * S as f64) as u64;
        match rng.random_range(0..if micro { 4 } else { 2 }) {
            0 => {
                let n = nodes[rng.random_range(0..nodes.len())];
                faults.push(kill(t, n));
                faults.push(restore(t + d, n));
            }
            1 => {
                let cut = rng.random_range(1..nodes.len());
                let (a, b) = nodes.split_at(cut);
                faults.push(json!({ "at_us": at(t), "action": "partition", "groups": [a, b] }));
                faults.push(json!({ "at_us": at(t + d), "action": "heal" }));
            }
            2 => {
                let svc = ["AuthService", "TradingService", "LineCheckService"][rng.random_range(0..3)];
                faults.push(json!({ "at_us": at(t), "action": "kill_replica", "service": svc, "index": rng.random_range(0..3) }));
            }
            _ => {
                let svc = ["AuthService", "TradingService", "LoggingService"][rng.random_range(0..3)];
                faults.push(json!({ "at_us": at(t), "action": "rolling_update", "service": svc, "version": 2 }));
            }
        }
        t += d + rng.random_range(0.5..2.0);
    }
    v["faults"] = Value::Array(faults);
    scenario(&v)
}

fn fingerprint(o: &RunOutput) -> (String, String) {
    (o.trace.export_text(), o.report.to_json())
}

fn c1_determinism(suite: &[(Scenario, RunOutput)]) -> String {
    for (s, first) in suite {
        let again = run_ok(s);
        assert!(fingerprint(first) == fingerprint(&again), "`{}` diverged between runs", s.name);
    }
    let events: u64 = suite.iter().map(|(_, o)| o.report.events).sum();
    format!("{} scenarios x 2 runs identical, {events} events per pass", suite.len())
}

fn c2_no_loss(suite: &[(Scenario, RunOutput)]) -> String {
    let mut published_total = 0;
    for (s, o) in suite {
        let broadcast: BTreeSet<QueueId> = o
            .broker
            .queues()
            .iter()
            .filter(|q| q.mode == QueueMode::Broadcast)
            .map(|q| q.id)
            .collect();
        let (mut published, mut acked, mut errored) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
        for r in o.trace.records() {
            match r.outcome {
                Outcome::Published { msg, .. } => {
                    published.insert(msg);
                }
                Outcome::Unroutable { msg } => {
                    published.insert(msg);
                    errored.insert(msg);
                }
                Outcome::Acked { msg, .. } => {
                    acked.insert(msg);
                }
                Outcome::Dispatched { msg, queue, .. } if broadcast.contains(&queue) => {
                    acked.insert(msg);
                }
                Outcome::ErrorQueued { msg, .. } => {
                    errored.insert(msg);
                }
                _ => {}
            }
        }
        let ledger = o.broker.ledger();
        assert_eq!(ledger.published, published, "{}: ledger and trace disagree on publishes", s.name);
        assert_eq!(ledger.acked, acked, "{}: ledger and trace disagree on acks", s.name);
        assert_eq!(ledger.error_queued, errored, "{}: ledger and trace disagree on error queue", s.name);
        let union: BTreeSet<MessageId> = acked.union(&errored).chain(ledger.pending.iter()).copied().collect();
        assert_eq!(published, union, "{}: published != acked + error + pending", s.name);
        assert!(
            ledger.pending.is_empty(),
            "{}: {} messages still pending: {:?}",
            s.name,
            ledger.pending.len(),
            ledger.pending.iter().take(5).collect::<Vec<_>>()
        );
        published_total += published.len();
    }
    format!("{published_total} published messages accounted for, none pending")
}

fn first_deliveries(o: &RunOutput) -> BTreeMap<ReplicaId, u64> {
    let mut m = BTreeMap::new();
    for r in o.trace.records() {
        if let Outcome::Dispatched { consumer, attempt: 1, .. } = r.outcome {
            *m.entry(consumer).or_default() += 1;
        }
    }
    m
}

fn c3_round_robin() -> String {
    for r in [1u32, 2, 3, 5] {
        let n = 12 * r as u64;
        let s = scenario(&custom_pipeline(&format!("rr-{r}"), r as usize, r, n, json!({})));
        let o = run_ok(&s);
        let got = first_deliveries(&o);
        assert_eq!(got.len(), r as usize, "R={r}: consumers seen {got:?}");
        assert!(got.values().all(|&c| c == 12), "R={r}: first deliveries {got:?}");

        let layout = vec![(
            "d".to_string(),
            (0..r).map(|i| (format!("n{i}"), 2, NodeStatus::Up)).collect::<Vec<_>>(),
        )];
        let topo = Topology::new(&layout, LatencyModel::default());
        let mut k: Kernel<()> = Kernel::new(1, Names::default());
        let mut reg = Registry::new(HealthProbeConfig::default());
        let svc = ServiceId(0);
        reg.declare(svc, Policy::RoundRobin);
        for i in 0..r {
            reg.register(ReplicaId::new(svc, i), NodeId(i), Health::Healthy, true).unwrap();
        }
        for window in 0..6 {
            let picks: BTreeSet<ReplicaId> = (0..r).map(|_| reg.resolve(&mut k, &topo, svc, NodeId(0)).unwrap()).collect();
            assert_eq!(picks.len(), r as usize, "R={r}: resolution window {window} repeated an instance");
        }
    }
    "R in {1,2,3,5}: 12 first deliveries each; resolution covers all instances per R calls".into()
}

fn attempts(o: &RunOutput, msg: MessageId) -> (Vec<(u32, ReplicaId)>, Option<ErrorReason>) {
    let mut seen = Vec::new();
    let mut err = None;
    for r in o.trace.records() {
        match r.outcome {
            Outcome::Dispatched { msg: m, consumer, attempt, .. } if m == msg => seen.push((attempt, consumer)),
            Outcome::ErrorQueued { msg: m, reason } if m == msg => err = Some(reason),
            _ => {}
        }
    }
    (seen, err)
}

fn c4_bounded_redelivery() -> String {
    let mut lines = Vec::new();
    for replicas in [2u32, 1] {
        let s = scenario(&custom_pipeline("never-ack", 2, replicas, 1, json!({ "behavior": "never_ack" })));
        let max = s.params.bus.max_redeliveries;
        let o = run_ok(&s);
        let (seen, err) = attempts(&o, MessageId(0));
        let counts: Vec<u32> = seen.iter().map(|a| a.0).collect();
        assert_eq!(counts, (1..=max + 1).collect::<Vec<_>>(), "attempt numbers");
        assert_eq!(err, Some(ErrorReason::Exhausted));
        if replicas >= 2 {
            assert!(seen.windows(2).all(|w| w[0].1 != w[1].1), "attempts must alternate: {seen:?}");
        }
        assert_eq!(o.report.error_queue_depth, 1);
        lines.push(format!("{replicas} consumer(s): {} attempts", seen.len()));
    }
    lines.join("; ")
}

fn ap_fuzz(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let micro = seed.is_multiple_of(2);
    let nodes: &[&str] = if micro { &MICRO_NODES } else { &MONO_NODES };
    let ap = if micro { "ExternalProviderAPI" } else { "ExternalAPI" };
    let mut v = preset(&format!("ap-fuzz-{seed}"), if micro { "microservice" } else { "monolith" }, seed, 40, 20.0);
    let mut times: Vec<u64> = (0..8).map(|_| rng.random_range(1..38) * S / 2 + rng.random_range(0..S / 2)).collect();
    times.sort();
    let faults: Vec<Value> = times
        .into_iter()
        .map(|at| match rng.random_range(0..3) {
            0 => json!({ "at_us": at, "action": "kill_node", "node": nodes[rng.random_range(0..nodes.len())] }),
            1 => json!({ "at_us": at, "action": "restore_node", "node": nodes[rng.random_range(0..nodes.len())] }),
            _ => json!({ "at_us": at, "action": "kill_replica", "service": ap, "index": rng.random_range(0..2) }),
        })
        .collect();
    v["faults"] = Value::Array(faults);
    scenario(&v)
}

fn c5_exclusivity() -> String {
    let mut takeovers = 0;
    for seed in 0..100 {
        let s = ap_fuzz(seed);
        let o = run_ok(&s);
        let ivals = active_intervals(&o.trace, s.horizon);
        for sid in 0..s.services.len() as u32 {
            if s.services[sid as usize].failover == fxsim_core::orchestrator::Failover::ActivePassive {
                let n = overlapping_actives(&ivals, ServiceId(sid));
                assert_eq!(n, 0, "seed {seed}: {n} overlapping Active intervals");
            }
        }
        takeovers += o
            .trace
            .records()
            .iter()
            .filter(|r| matches!(r.outcome, Outcome::LeaseGranted { .. }) && r.time > SimTime::ZERO)
            .count();
    }
    format!("100 seeds, 0 overlaps, {takeovers} lease hand-offs exercised")
}

fn shares(m: &BTreeMap<ReplicaId, u64>) -> Vec<(ReplicaId, f64)> {
    let total: u64 = m.values().sum();
    m.iter().map(|(&r, &c)| (r, c as f64 / total.max(1) as f64)).collect()
}

fn pathology_scenario(preset_name: &str, seed: u64) -> Scenario {
    let mut v = preset(&format!("pathology-{preset_name}"), preset_name, seed, 100, 150.0);
    v["faults"] = pathology();
    scenario(&v)
}

fn c6_fallback_pathology() -> String {
    let window = SimTime::from_micros(60 * S);
    let mono = pathology_scenario("monolith", 7);
    let o = run_ok(&mono);
    let rs = served_by_stage(&o.trace, Stage::RequestService, window);
    let total: u64 = rs.values().sum();
    assert!(total > 0, "no RequestService traffic in the final window");
    let n3 = mono.node_names().iter().position(|n| n == "n3").unwrap() as u32;
    let on_c: u64 = rs
        .iter()
        .filter(|(r, _)| o.orchestrator.replica(**r).node == NodeId(n3))
        .map(|(_, c)| c)
        .sum();
    assert_eq!(on_c, total, "monolith final-window traffic {rs:?}");

    let micro = pathology_scenario("microservice", 7);
    let o = run_ok(&micro);
    let lc = served_by_stage(&o.trace, Stage::LineCheck, window);
    let sh = shares(&lc);
    let r = micro.services.iter().find(|s| s.name == "LineCheckService").unwrap().replicas as f64;
    assert_eq!(sh.len(), r as usize, "micro final-window replicas {lc:?}");
    for (rep, share) in &sh {
        assert!((share - 1.0 / r).abs() <= 0.1 / r, "replica {rep:?} share {share:.3}");
    }
    let desc: Vec<String> = sh.iter().map(|(_, s)| format!("{s:.3}")).collect();
    format!("monolith {on_c}/{total} on host C; microservice shares [{}]", desc.join(", "))
}

fn c7_rolling_update() -> String {
    let mut v = preset("rolling", "microservice", 3, 40, 50.0);
    v["workload"]["arrivals"] = json!({ "type": "constant", "rate_per_s": 50.0 });
    v["workload"]["end_us"] = json!(30 * S);
    v["faults"] = json!([{ "at_us": 10 * S, "action": "rolling_update", "service": "AuthService", "version": 2 }]);
    let s = scenario(&v);
    let o = run_ok(&s);
    let auth = ServiceId(s.services.iter().position(|x| x.name == "AuthService").unwrap() as u32);
    let (mut start, mut end) = (None, None);
    let mut active: BTreeMap<ReplicaId, bool> = BTreeMap::new();
    let mut min_active = usize::MAX;
    for r in o.trace.records() {
        match r.outcome {
            Outcome::UpdateStarted { service, .. } if service == auth => start = Some(r.time),
            Outcome::UpdateCompleted { service, .. } if service == auth => end = Some(r.time),
            Outcome::ReplicaState { replica, to, .. } if replica.service == auth => {
                active.insert(replica, to == ReplicaState::Active);
                if r.time > SimTime::ZERO {
                    min_active = min_active.min(active.values().filter(|&&a| a).count());
                }
            }
            _ => {}
        }
    }
    let (start, end) = (start.expect("update started"), end.expect("update completed"));
    let failed: Vec<RequestId> = o
        .requests
        .iter()
        .filter(|r| matches!(r.outcome, RequestOutcome::Failed | RequestOutcome::ErrorQueued))
        .map(|r| r.id)
        .collect();
    assert!(failed.is_empty(), "failed requests {failed:?}");
    assert!(min_active >= 1, "Active replica count dropped to {min_active}");
    assert!(o.orchestrator.of_service(auth).all(|r| r.version == 2));
    format!(
        "update {:.1}s..{:.1}s, 0 failed of {}, min Active {min_active}",
        start.as_secs_f64(),
        end.as_secs_f64(),
        o.report.requests_generated
    )
}

fn partition_scenario() -> Scenario {
    let v = json!({
        "schema": "fxsim/1",
        "name": "partition-heal",
        "preset": "custom",
        "seed": 11,
        "horizon_us": 100 * S,
        "topology": { "datacenters": [
            { "name": "d1", "nodes": [ { "name": "a1" }, { "name": "a2" } ] },
            { "name": "d2", "nodes": [ { "name": "b1" }, { "name": "b2" }, { "name": "b3" } ] },
        ] },
        "services": [
            { "name": "Broker", "kind": "infrastructure", "role": "broker", "replicas": 2, "placement": "one_per_datacenter" },
            { "name": "Worker", "role": "custom", "replicas": 4, "consumes": ["q"], "processing": { "constant": 2000.0 } },
        ],
        "bus": {
            "exchanges": ["x"],
            "queues": [ { "name": "q" } ],
            "bindings": [ { "exchange": "x", "queue": "q", "pattern": "job.*" } ],
        },
        "workload": {
            "arrivals": { "type": "poisson", "rate_per_s": 40.0 },
            "end_us": 70 * S,
            "sources": [
                { "from_node": "a1", "exchange": "x", "routing_key": "job.a" },
                { "from_node": "b1", "exchange": "x", "routing_key": "job.b" },
            ],
        },
        "faults": [
            { "at_us": 20 * S, "action": "partition", "groups": [["a1", "a2"], ["b1", "b2", "b3"]] },
            { "at_us": 50 * S, "action": "heal" },
        ],
    });
    scenario(&v)
}

fn c8_partition_heal() -> String {
    let s = partition_scenario();
    let o = run_ok(&s);
    let (p0, p1) = (SimTime::from_micros(20 * S), SimTime::from_micros(50 * S));
    let sides: BTreeSet<usize> = o
        .broker
        .messages()
        .iter()
        .filter(|m| m.published_at > p0 && m.published_at < p1)
        .map(|m| m.side())
        .collect();
    assert!(sides.len() >= 2, "publishes only on sides {sides:?}");

    let ledger = o.broker.ledger();
    assert!(ledger.pending.is_empty(), "pending after heal: {}", ledger.pending.len());
    let mut acked_any = BTreeSet::new();
    let mut processed_before_heal = BTreeSet::new();
    let mut reenqueued = BTreeSet::new();
    for r in o.trace.records() {
        match r.outcome {
            Outcome::Acked { msg, .. } => {
                acked_any.insert(msg);
            }
            Outcome::Processed { msg, .. } if r.time <= p1 => {
                processed_before_heal.insert(msg);
            }
            Outcome::Reenqueued { msg } => {
                reenqueued.insert(msg);
            }
            _ => {}
        }
    }
    for m in &ledger.published {
        assert!(
            acked_any.contains(m) || ledger.error_queued.contains(m),
            "{m} neither acked nor error-queued"
        );
    }
    let already = reenqueued.intersection(&processed_before_heal).count() as u64;
    let dups = duplicate_count(&o.trace);
    assert!(dups >= already, "duplicates {dups} < re-enqueued already processed {already}");
    for (_, reason) in o.broker.error_queue() {
        assert!(matches!(reason, ErrorReason::Exhausted | ErrorReason::Unroutable));
    }
    format!(
        "{} published, {} re-enqueued ({already} already processed), {dups} duplicates, {} error-queued",
        ledger.published.len(),
        reenqueued.len(),
        ledger.error_queued.len()
    )
}

fn success(o: &RunOutput) -> f64 {
    o.report.availability_requests
}

fn c9_directional() -> String {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=10u64 {
        let node = MONO_NODES[(seed % 3) as usize];
        let mk = |p: &str| {
            let mut v = preset(&format!("paired-{seed}"), p, seed, 60, 150.0);
            v["faults"] = json!([kill(15.0, node), restore(30.0, node)]);
            scenario(&v)
        };
        let (m, u) = (run_ok(&mk("monolith")), run_ok(&mk("microservice")));
        if success(&u) >= success(&m) {
            wins += 1;
        }
        let (pm, pu) = (run_ok(&pathology_scenario("monolith", seed)), run_ok(&pathology_scenario("microservice", seed)));
        assert!(
            success(&pu) > success(&pm),
            "seed {seed}: pathology microservice {:.4} <= monolith {:.4}",
            success(&pu),
            success(&pm)
        );
        lines.push(format!("{:.3}/{:.3}", success(&u), success(&m)));
    }
    assert!(wins >= 9, "microservice >= monolith in only {wins}/10 seeds: {lines:?}");
    format!("single-node outage: {wins}/10 seeds; pathology: 10/10 strictly greater")
}

fn c10_proximity() -> String {
    let mk = |policy: &str| {
        let mut v = preset(&format!("cache-{policy}"), "microservice", 5, 30, 100.0);
        v["services"] = json!([{ "name": "RedisCache", "policy": policy }]);
        run_ok(&scenario(&v)).report.cross_dc_messages
    };
    let (p, rr) = (mk("proximity"), mk("round_robin"));
    assert!(p < rr, "proximity {p} !< round_robin {rr}");
    format!("cross-DC messages: proximity {p} < round_robin {rr}")
}

fn c11_cache() -> String {
    let mk = |preset_name: &str, hit: f64| {
        let mut v = preset(&format!("hit-{hit}"), preset_name, 9, 30, 60.0);
        v["params"] = json!({ "cache": { "hit_ratio": hit } });
        run_ok(&scenario(&v)).report
    };
    let sweep: Vec<_> = [0.0, 0.5, 1.0].iter().map(|&h| mk("microservice", h)).collect();
    let lat: Vec<f64> = sweep.iter().map(|r| r.latency_mean_us).collect();
    assert!(lat[0] > lat[1] && lat[1] > lat[2], "latency not decreasing: {lat:?}");
    let mono = mk("monolith", 0.0);
    let (a, b) = (sweep[0].data_access_mean_us, mono.data_access_mean_us);
    assert!((a - b).abs() <= 0.05 * b, "mainframe time per request: micro {a} vs monolith {b}");
    format!("mean latency {:.0} > {:.0} > {:.0} us; mainframe per request {a:.0} vs {b:.0} us", lat[0], lat[1], lat[2])
}

type Rec = (u64, EntityId, EventKind, Outcome);

/// Hand-computable schedule: two workers pinned to hosts a and b, broker on a,
/// six messages from a one millisecond apart, constant 500us between hosts and
/// 1000us processing. Messages alternate between the workers.
fn oracle(messages: u64, link_us: u64, proc_us: u64) -> Vec<Rec> {
    let q = QueueId(1);
    let broker = ReplicaId::new(ServiceId(0), 0);
    let workers = [ReplicaId::new(ServiceId(1), 0), ReplicaId::new(ServiceId(1), 1)];
    let mut out: Vec<Rec> = Vec::new();
    for (r, node) in [(broker, 0), (workers[0], 0), (workers[1], 1)] {
        out.push((
            0,
            EntityId::Replica(r),
            EventKind::UpdateStep,
            Outcome::ReplicaState { replica: r, node: NodeId(node), from: ReplicaState::Starting, to: ReplicaState::Active },
        ));
        out.push((
            0,
            EntityId::Replica(r),
            EventKind::UpdateStep,
            Outcome::Health { replica: r, view: 0, from: Health::Suspect, to: Health::Healthy },
        ));
    }
    let mut free_at = [0u64; 2];
    for i in 0..messages {
        let t = i * 1000;
        let (req, msg) = (RequestId(i), MessageId(i));
        let w = (i % 2) as usize;
        let hop = if w == 0 { 0 } else { link_us };
        let arrive = t + hop;
        let start = arrive.max(free_at[w]);
        let done = start + proc_us;
        free_at[w] = done;
        let md = EventKind::MessageDelivery;
        out.push((t, EntityId::Request(req), EventKind::WorkArrival, Outcome::Arrival { request: req, kind: RequestKind::Trade }));
        out.push((t, EntityId::Queue(q), md, Outcome::Published { msg, queue: q }));
        out.push((t, EntityId::Queue(q), md, Outcome::Dispatched { msg, queue: q, consumer: workers[w], attempt: 1 }));
        out.push((start, EntityId::Request(req), md, Outcome::Stage { request: req, stage: Stage::Custom, replica: workers[w] }));
        out.push((
            done,
            EntityId::Replica(workers[w]),
            EventKind::ProcessingDone,
            Outcome::Processed { msg, queue: q, consumer: workers[w], broadcast: false },
        ));
        out.push((
            done,
            EntityId::Request(req),
            EventKind::ProcessingDone,
            Outcome::RequestDone { request: req, outcome: RequestOutcome::Completed, latency_us: done - t },
        ));
        out.push((done + hop, EntityId::Queue(q), md, Outcome::Acked { msg, consumer: workers[w] }));
    }
    out
}

fn canonical(mut v: Vec<Rec>) -> Vec<Rec> {
    v.sort_by_key(|r| (r.0, format!("{:?}", r)));
    v
}

fn c12_oracle() -> String {
    let mut v = custom_pipeline("oracle", 2, 2, 6, json!({}));
    v["horizon_us"] = json!(100_000);
    v["params"] = json!({
        "latency": { "intra_dc": { "constant": 500.0 }, "inter_dc": { "constant": 2000.0 }, "mainframe_call": { "constant": 20000.0 } },
        "probe": { "interval_us": 1_000_000 },
    });
    let o = run_ok(&scenario(&v));
    let got: Vec<Rec> = o
        .trace
        .records()
        .iter()
        .map(|r| (r.time.as_micros(), r.entity, r.kind, r.outcome.clone()))
        .collect();
    let want = oracle(6, 500, 1000);
    let (got, want) = (canonical(got), canonical(want));
    if got != want {
        let first = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
        panic!(
            "trace differs at record {first} (engine {} records, oracle {}):\n engine: {:?}\n oracle: {:?}",
            got.len(),
            want.len(),
            got.get(first),
            want.get(first)
        );
    }
    format!("{} records match the enumerated schedule", got.len())
}

type Criterion<'a> = Box<dyn Fn() -> String + 'a>;

fn main() {
    panic::set_hook(Box::new(|info| eprintln!("    {info}")));
    let suite: Vec<(Scenario, RunOutput)> = (0..20)
        .map(|i| {
            let s = random_scenario(i);
            let o = run_ok(&s);
            (s, o)
        })
        .collect();
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("determinism", Box::new(|| c1_determinism(&suite))),
        ("at-least-once, no loss", Box::new(|| c2_no_loss(&suite))),
        ("round-robin fairness", Box::new(c3_round_robin)),
        ("bounded redelivery", Box::new(c4_bounded_redelivery)),
        ("active/passive exclusivity", Box::new(c5_exclusivity)),
        ("fall-back pathology", Box::new(c6_fallback_pathology)),
        ("zero-downtime rolling update", Box::new(c7_rolling_update)),
        ("partition heal", Box::new(c8_partition_heal)),
        ("directional comparison", Box::new(c9_directional)),
        ("geographical scalability", Box::new(c10_proximity)),
        ("cache effect", Box::new(c11_cache)),
        ("small-instance oracle", Box::new(c12_oracle)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match panic::catch_unwind(panic::AssertUnwindSafe(f)) {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(_) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
