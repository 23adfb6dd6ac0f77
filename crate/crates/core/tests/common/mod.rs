//! Scenario builders shared by the integration tests.
#![allow(dead_code)]

use fxsim_core::{run, validate, RunOutput, Scenario};
use serde_json::{json, Value};

pub const S: u64 = 1_000_000;

pub fn scenario(v: &Value) -> Scenario {
    let text = serde_json::to_string_pretty(v).unwrap();
    match validate(&text) {
        Ok(s) => s,
        Err(e) => panic!("test scenario rejected:\n{e}\n{text}"),
    }
}

pub fn run_ok(s: &Scenario) -> RunOutput {
    run(s).unwrap_or_else(|e| panic!("run of `{}` failed: {e}", s.name))
}

/// A preset scenario under Poisson load.
pub fn preset(name: &str, preset: &str, seed: u64, horizon_s: u64, rate: f64) -> Value {
    json!({
        "schema": "fxsim/1",
        "name": name,
        "preset": preset,
        "seed": seed,
        "horizon_us": horizon_s * S,
        "workload": { "arrivals": { "type": "poisson", "rate_per_s": rate } },
    })
}

pub fn kill(at_s: f64, node: &str) -> Value {
    json!({ "at_us": (at_s * S as f64) as u64, "action": "kill_node", "node": node })
}

pub fn restore(at_s: f64, node: &str) -> Value {
    json!({ "at_us": (at_s * S as f64) as u64, "action": "restore_node", "node": node })
}

/// Kill host A, bring it back, then the same for host B.
pub fn pathology() -> Value {
    json!([kill(10.0, "n1"), restore(20.0, "n1"), kill(30.0, "n2"), restore(40.0, "n2")])
}

/// Single-DC custom topology: `nodes` hosts, one broker on the first, and a
/// `Worker` service with `workers` replicas consuming `q` from exchange `x`.
/// One source on the first host publishes `messages` requests 1ms apart.
pub fn custom_pipeline(name: &str, nodes: usize, workers: u32, messages: u64, worker_extra: Value) -> Value {
    let node_names: Vec<String> = (0..nodes).map(|i| format!("h{i}")).collect();
    let pinned: Vec<String> = (0..workers as usize).map(|i| node_names[i % nodes].clone()).collect();
    let mut worker = json!({
        "name": "Worker",
        "role": "custom",
        "replicas": workers,
        "pinned_nodes": pinned,
        "consumes": ["q"],
        "processing": { "constant": 1000.0 },
    });
    if let (Some(w), Some(extra)) = (worker.as_object_mut(), worker_extra.as_object()) {
        for (k, v) in extra {
            w.insert(k.clone(), v.clone());
        }
    }
    json!({
        "schema": "fxsim/1",
        "name": name,
        "preset": "custom",
        "seed": 1,
        "horizon_us": 60 * S,
        "topology": { "datacenters": [ {
            "name": "d1",
            "nodes": node_names.iter().map(|n| json!({ "name": n })).collect::<Vec<_>>(),
        } ] },
        "services": [
            { "name": "Broker", "kind": "infrastructure", "role": "broker", "replicas": 1, "placement": "one_per_datacenter", "pinned_nodes": [node_names[0].clone()] },
            worker,
        ],
        "bus": {
            "exchanges": ["x"],
            "queues": [ { "name": "q" } ],
            "bindings": [ { "exchange": "x", "queue": "q", "pattern": "k" } ],
        },
        "workload": {
            "arrivals": { "type": "constant", "rate_per_s": 1000.0 },
            "end_us": messages * 1000,
            "sources": [ { "from_node": node_names[0].clone(), "exchange": "x", "routing_key": "k", "kind": "Trade" } ],
        },
    })
}
