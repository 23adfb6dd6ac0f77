//! Benchmark scenarios.

use fxsim_core::{validate, Scenario};

/// A preset under Poisson load for `horizon_s` seconds, with an optional JSON
/// fault list.
pub fn preset(preset: &str, horizon_s: u64, rate: f64, faults: &str) -> Scenario {
    let text = format!(
        r#"{{"schema":"fxsim/1","name":"bench-{preset}","preset":"{preset}","seed":42,
            "horizon_us":{},"workload":{{"arrivals":{{"type":"poisson","rate_per_s":{rate}}}}},
            "faults":{faults}}}"#,
        horizon_s * 1_000_000
    );
    validate(&text).expect("benchmark scenario is valid")
}

pub fn steady(preset_name: &str) -> Scenario {
    preset(preset_name, 20, 150.0, "[]")
}

/// Two sequential host outages, the schedule that stresses failover most.
pub fn outages(preset_name: &str) -> Scenario {
    preset(
        preset_name,
        20,
        150.0,
        r#"[{"at_us":4000000,"action":"kill_node","node":"n1"},
            {"at_us":8000000,"action":"restore_node","node":"n1"},
            {"at_us":10000000,"action":"kill_node","node":"n2"},
            {"at_us":14000000,"action":"restore_node","node":"n2"}]"#,
    )
}
