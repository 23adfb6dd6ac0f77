use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fxsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fxsim")).args(args).output().expect("spawn fxsim")
}

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn small(dir: &Path, preset: &str, extra: &str) -> PathBuf {
    let p = dir.join(format!("{preset}.json"));
    let body = format!(
        r#"{{"schema":"fxsim/1","name":"cli-{preset}","preset":"{preset}","seed":3,"horizon_us":5000000,
            "workload":{{"arrivals":{{"type":"constant","rate_per_s":40}}}}{extra}}}"#
    );
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path(), "microservice", "");
    let (out, trace) = (dir.path().join("r.json"), dir.path().join("t.txt"));
    let o = fxsim(&["run", "--scenario", s(&sc), "--out", s(&out), "--trace", s(&trace)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["scenario"], "cli-microservice");
    assert_eq!(report["requests_generated"], 200);
    let t = fs::read_to_string(&trace).unwrap();
    let first = t.lines().next().unwrap();
    assert_eq!(first.split(' ').next(), Some("0"));
    assert!(!dir.path().join("r.json.tmp").exists());
}

#[test]
fn same_seed_same_bytes_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path(), "monolith", "");
    let mut texts = Vec::new();
    for (i, seed) in ["7", "7", "8"].iter().enumerate() {
        let t = dir.path().join(format!("t{i}"));
        let out = dir.path().join(format!("r{i}"));
        let o = fxsim(&["run", "--scenario", s(&sc), "--seed", seed, "--trace", s(&t), "--out", s(&out)]);
        assert!(o.status.success());
        texts.push(fs::read(&t).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    assert_ne!(texts[0], texts[2]);
}

#[test]
fn text_format_is_human_readable() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path(), "monolith", "");
    let out = dir.path().join("r.txt");
    let o = fxsim(&["run", "--scenario", s(&sc), "--out", s(&out), "--format", "text"]);
    assert!(o.status.success());
    let body = fs::read_to_string(&out).unwrap();
    assert!(serde_json::from_str::<serde_json::Value>(&body).is_err());
    assert!(body.contains("cli-monolith"));
}

#[test]
fn invalid_scenario_exits_2_with_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(
        &p,
        r#"{"schema":"fxsim/1","name":"bad","preset":"monolith","seed":1,"horizon_us":1000,
            "faults":[{"at_us":5,"action":"kill_node","node":"zz"},{"at_us":6,"action":"kill_node","node":"yy"}]}"#,
    )
    .unwrap();
    let o = fxsim(&["validate", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("zz") && err.contains("yy"), "{err}");

    let out = dir.path().join("never.json");
    let o = fxsim(&["run", "--scenario", s(&p), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_file_exits_1() {
    let o = fxsim(&["validate", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_prints_both_columns() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path(), "monolith", "");
    let out = dir.path().join("cmp.json");
    let o = fxsim(&["compare", "--scenario", s(&sc), "--presets", "monolith,microservice", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("monolith") && text.contains("microservice"), "{text}");
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(!table["rows"].as_array().unwrap().is_empty());
}

#[test]
fn list_presets_names_both_architectures() {
    let o = fxsim(&["list-presets"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["monolith", "microservice", "custom", "RequestService", "LineCheckService"] {
        assert!(text.contains(name), "missing {name}:\n{text}");
    }
}

#[test]
fn shipped_scenarios_validate() {
    let mut n = 0;
    for e in fs::read_dir(scenario_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            let o = fxsim(&["validate", s(&p)]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            n += 1;
        }
    }
    assert!(n >= 3);
}
