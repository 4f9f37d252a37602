use mcastsim::harness::run_scenario;
use mcastsim::scenario::Directive;
use mcastsim::{Scenario, ScenarioError};

mod common;

#[test]
fn resolved_toml_loads_back_equal() {
    let s = common::mobile_multicast(4, 50, 800.0, 30.0, 3);
    let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn shipped_scenarios_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}

#[test]
fn unknown_keys_are_rejected() {
    let mut text = Scenario::minimal(10, 100.0, 100.0, 5.0, 1).to_toml_string();
    text.push_str("\n[bogus]\nx = 1\n");
    assert!(matches!(Scenario::from_toml_str(&text), Err(ScenarioError::Parse(_))));
}

#[test]
fn invalid_values_name_the_key() {
    let text = Scenario::minimal(10, 100.0, 100.0, 5.0, 1)
        .to_toml_string()
        .replace("duration_s = 5.0", "duration_s = -1.0");
    let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
    assert!(err.contains("duration_s"), "{err}");
}

#[test]
fn out_of_range_node_in_workload_is_rejected() {
    let mut s = Scenario::minimal(10, 100.0, 100.0, 5.0, 1);
    s.workload.push(Directive::FailNode { at_s: 1.0, node: 10 });
    assert!(s.validate().is_err());
}

#[test]
fn same_seed_same_trace_other_seed_differs() {
    let a = run_scenario(&common::mobile_multicast(2, 60, 900.0, 25.0, 3), None).unwrap();
    let b = run_scenario(&common::mobile_multicast(2, 60, 900.0, 25.0, 3), None).unwrap();
    let c = run_scenario(&common::mobile_multicast(3, 60, 900.0, 25.0, 3), None).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.report, b.report);
    assert_ne!(a.trace, c.trace);
}

#[test]
fn until_stops_early() {
    let s = common::exactly_once(1, 20);
    let r = run_scenario(&s, Some(12.0)).unwrap();
    assert!(r.trace.iter().all(|e| e.t.as_secs() <= 12.0));
    assert!(common::of_kind(&r.trace, "data_send").next().is_none());
}
