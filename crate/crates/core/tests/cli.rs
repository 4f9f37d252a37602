use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcastsim"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Strict parse: exact header, three fields on every row.
fn read_metrics(path: &Path) -> Vec<(String, String, String)> {
    let mut rd = csv::ReaderBuilder::new().flexible(false).from_path(path).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["metric", "key", "value"]);
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string(), r[2].to_string())
        })
        .collect()
}

#[test]
fn run_writes_artifacts_and_stats_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(bin()
        .args(["run", "--seed", "3", "--until", "40", "--scenario"])
        .arg(scenario("exactly_once.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let rows = read_metrics(&out.join("metrics.csv"));
    assert!(rows.iter().any(|(m, _, _)| m == "delivery_ratio"));
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["t", "node", "kind", "detail"] {
            assert!(v.get(k).is_some(), "missing {k} in {line}");
        }
    }
    let resolved = std::fs::read_to_string(out.join("scenario_resolved.toml")).unwrap();
    let s = mcastsim::Scenario::from_toml_str(&resolved).unwrap();
    assert_eq!(s.seed, 3);

    let again = dir.path().join("stats");
    ok(bin()
        .arg("stats")
        .arg("--trace")
        .arg(out.join("trace.jsonl"))
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap());
    assert_eq!(
        std::fs::read(out.join("metrics.csv")).unwrap(),
        std::fs::read(again.join("metrics.csv")).unwrap()
    );
}

#[test]
fn packet_trace_adds_send_events() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(bin()
        .args(["run", "--seed", "1", "--until", "3", "--trace", "--scenario"])
        .arg(scenario("exactly_once.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert!(trace.contains("\"kind\":\"send\""));
}

#[test]
fn empty_trace_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("empty.jsonl");
    std::fs::write(&t, "").unwrap();
    ok(bin().arg("stats").arg("--trace").arg(&t).arg("--out").arg(dir.path()).output().unwrap());
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), "metric,key,value\n");
    assert!(read_metrics(&dir.path().join("metrics.csv")).is_empty());
}

#[test]
fn bad_scenarios_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nduration_s = -5.0\nnode_count = 3\n[area]\nwidth_m = 10.0\nheight_m = 10.0\n").unwrap();
    for path in [bad, dir.path().join("missing.toml")] {
        let out = bin()
            .args(["run", "--seed", "1", "--scenario"])
            .arg(&path)
            .arg("--out")
            .arg(dir.path().join("o"))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.toml");
    std::fs::write(&base, mcastsim::Scenario::minimal(30, 500.0, 500.0, 6.0, 8).to_toml_string()).unwrap();
    ok(bin()
        .args(["sweep", "--param", "zone.radius_R=1,2", "--seeds", "2", "--scenario"])
        .arg(&base)
        .arg("--out")
        .arg(dir.path().join("sw"))
        .output()
        .unwrap());
    for v in [1, 2] {
        for seed in [8, 9] {
            let p = dir.path().join(format!("sw/zone.radius_R={v}/seed_{seed}/metrics.csv"));
            read_metrics(&p);
        }
    }
    let mut rd = csv::Reader::from_path(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["param", "value", "seed", "metric", "key", "metric_value"]);
    let seeds: std::collections::BTreeSet<String> = rd.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec!["8", "9"]);
}

#[test]
fn unwritable_output_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("not_a_dir");
    std::fs::write(&file, "x").unwrap();
    let out = bin()
        .args(["run", "--seed", "1", "--until", "1", "--scenario"])
        .arg(scenario("exactly_once.toml"))
        .arg("--out")
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
