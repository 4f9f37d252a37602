//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::*;
use mcastsim::contacts::{contact_bound, selection_probability, SelectionInputs, SelectionParams};
use mcastsim::harness::{emit, run_scenario};
use mcastsim::metrics::MetricsReport;
use mcastsim::mobility::MobilityModel;
use mcastsim::rendezvous::AddressGrid;
use mcastsim::scenario::Directive;
use mcastsim::sim::World;
use mcastsim::{GroupAddress, NodeId, Position, Scenario, SimTime, TraceEvent};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { ok, detail }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let mut o = f();
    let el = t0.elapsed();
    o.detail = format!("{} [{:.1} s]", o.detail, el.as_secs_f64());
    if let Some(l) = limit {
        if el > l {
            o.ok = false;
            o.detail = format!("{} exceeds {} s limit", o.detail, l.as_secs());
        }
    }
    o
}

fn run(s: &Scenario) -> (Vec<TraceEvent>, MetricsReport) {
    let r = run_scenario(s, None).expect("scenario runs");
    (r.trace, r.report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// 1
fn zone_oracle() -> Outcome {
    let mut mismatched = 0usize;
    let mut checked = 0usize;
    for seed in 0..50u64 {
        for radius in 1..=3u32 {
            let mut s = Scenario::minimal(200, 1500.0, 1500.0, 6.0, 1000 + seed);
            s.zone.radius = radius;
            s.contacts.enabled = false;
            s.rr.eligible_fraction = 0.0;
            let mut w = World::new(&s).unwrap();
            w.run_until(SimTime::from_secs(6.0)).unwrap();
            let adj = w.connectivity();
            for node in w.nodes() {
                let oracle = bfs(&adj, node.id, radius);
                let got: BTreeMap<NodeId, u32> = node.zone.members.iter().map(|(m, z)| (*m, z.hops)).collect();
                checked += 1;
                if got != oracle {
                    mismatched += 1;
                }
            }
        }
    }
    outcome(mismatched == 0, format!("{mismatched} of {checked} zone tables differ from BFS"))
}

// 2
fn contact_route_bound() -> Outcome {
    let mut s = Scenario::minimal(500, 3000.0, 3000.0, 300.0, 2);
    s.mobility.model = MobilityModel::RandomWaypoint;
    s.mobility.pause_time = 5.0;
    s.contacts.a_half = 0.1;
    s.workload.push(Directive::RouteQueries {
        at_s: 10.0,
        until_s: 300.0,
        rate_hz: 5.0,
        rounds: 1,
    });
    let bound = contact_bound(s.zone.radius);
    let mut w = World::new(&s).unwrap();
    let mut over_live = 0usize;
    let mut live_samples = 0usize;
    for t in 1..=300 {
        w.run_until(SimTime::from_secs(t as f64)).unwrap();
        for n in w.nodes().iter().filter(|n| n.alive) {
            for c in n.contacts.values() {
                live_samples += 1;
                if c.route.len() - 1 > bound {
                    over_live += 1;
                }
            }
        }
    }
    let trace = w.finish();
    let mut checks = 0usize;
    let mut with_contacts = 0usize;
    let mut over = 0usize;
    for e in of_kind(&trace, "contact_check") {
        checks += 1;
        if e.detail["count"].as_u64().unwrap() > 0 {
            with_contacts += 1;
        }
        if e.detail["max_hops"].as_u64().unwrap() as usize > bound || e.detail["bound"].as_u64().unwrap() as usize != bound {
            over += 1;
        }
    }
    let ok = over == 0 && over_live == 0 && with_contacts > 0;
    outcome(
        ok,
        format!(
            "{over} of {checks} checkpoints ({with_contacts} with contacts) and {over_live} of {live_samples} per-second samples exceed {bound} hops"
        ),
    )
}

// 3
fn selection_properties() -> Outcome {
    let params = SelectionParams {
        k: 4.0,
        e_half: 1.0e6,
        a_half: 1.0,
    };
    let inputs = (0.0..1.0e7f64, 0.0..=1.0f64, 0.0..5.0f64, 1u32..50, 0.0..1.0e7f64, 0.0..=1.0f64, 0.0..5.0f64, 0u32..10);
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let res = runner.run(&inputs, |(e, s, a, z, de, ds, da, dz)| {
        let base = SelectionInputs {
            e_est: e,
            s_est: s,
            a_est: a,
            z_est: z,
        };
        let p = selection_probability(&base, &params);
        prop_assert!((0.0..=1.0).contains(&p));
        let up = |i: SelectionInputs| selection_probability(&i, &params);
        let (pe, ps) = (up(SelectionInputs { e_est: e + de, ..base }), up(SelectionInputs { s_est: (s + ds).min(1.0), ..base }));
        let (pa, pz) = (up(SelectionInputs { a_est: a + da, ..base }), up(SelectionInputs { z_est: z + dz, ..base }));
        prop_assert!(pe >= p && ps >= p && pa >= p, "not monotone: {} {} {} vs {}", pe, ps, pa, p);
        prop_assert!(pz <= p, "not anti-monotone in Z: {} vs {}", pz, p);
        prop_assert_eq!(up(SelectionInputs { e_est: 0.0, ..base }), 0.0);
        prop_assert_eq!(up(SelectionInputs { s_est: 0.0, ..base }), 0.0);
        prop_assert_eq!(up(SelectionInputs { a_est: 0.0, ..base }), 0.0);
        Ok(())
    });
    match res {
        Ok(()) => outcome(true, "10000 random inputs satisfy range, monotonicity and zero rules".into()),
        Err(e) => outcome(false, format!("{e}")),
    }
}

// 4
fn rr_partition() -> Outcome {
    let (w, h) = (3000.0, 1700.0);
    let g = AddressGrid::new(w, h, 8, 6, 6, 10).unwrap();
    let mut bad = Vec::new();
    let rect = |c: u32, r: u32| g.region(c + g.cols() * r).rect;
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let q = rect(c, r);
            if !(q.x1 < q.x2 && q.y1 < q.y2) {
                bad.push(format!("empty cell {c},{r}"));
            }
            if c == 0 && q.x1 != 0.0 || c + 1 == g.cols() && q.x2 != w {
                bad.push(format!("x extent at {c},{r}"));
            }
            if r == 0 && q.y1 != 0.0 || r + 1 == g.rows() && q.y2 != h {
                bad.push(format!("y extent at {c},{r}"));
            }
            if c + 1 < g.cols() && rect(c + 1, r).x1 != q.x2 {
                bad.push(format!("x seam at {c},{r}"));
            }
            if r + 1 < g.rows() && rect(c, r + 1).y1 != q.y2 {
                bad.push(format!("y seam at {c},{r}"));
            }
            if r > 0 && (rect(c, 0).x1 != q.x1 || rect(c, 0).x2 != q.x2) {
                bad.push(format!("column misaligned at {c},{r}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut trips = 0;
    for _ in 0..10_000 {
        let p = Position::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h));
        let prefix = g.prefix_of_position(&p);
        let suffix = rng.random_range(0..=g.max_suffix());
        let region = g.rr_of_group(GroupAddress::new(prefix, suffix));
        let owners = (0..g.region_count())
            .filter(|&q| {
                let r = g.region(q).rect;
                let in_x = p.x >= r.x1 && (p.x < r.x2 || r.x2 == w);
                let in_y = p.y >= r.y1 && (p.y < r.y2 || r.y2 == h);
                in_x && in_y
            })
            .collect::<Vec<_>>();
        if region.prefix == prefix && region.rect.contains_closed(&p) && owners == vec![prefix] {
            trips += 1;
        }
    }
    let ok = bad.is_empty() && trips == 10_000;
    outcome(
        ok,
        format!("{} tiling defects; {trips}/10000 positions round-trip", bad.len()),
    )
}

// 5
fn sds_band() -> Outcome {
    let mut inside = 0;
    let mut counts = Vec::new();
    for seed in 0..100u64 {
        let mut s = Scenario::minimal(100, 1000.0, 1000.0, 60.0, 500 + seed);
        s.rr.grid_cols = 1;
        s.rr.grid_rows = 1;
        s.rr.prefix_bits = 0;
        s.rr.target_sds = 5;
        s.rr.eligible_fraction = 1.0;
        let (trace, _) = run(&s);
        let last = of_kind(&trace, "sds_count").last().expect("census ran");
        let c = last.detail["counts"][0][1].as_u64().unwrap();
        counts.push(c);
        if (3..=7).contains(&c) {
            inside += 1;
        }
    }
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for c in &counts {
        *hist.entry(*c).or_default() += 1;
    }
    outcome(inside >= 95, format!("{inside}/100 runs end with 3..=7 SDSs; histogram {hist:?}"))
}

// 6
fn exactly_once_delivery() -> Outcome {
    let s = exactly_once(6, 100);
    let (trace, report) = run(&s);
    let (per, dups) = deliveries(&trace);
    let receivers = [11u32, 23, 37, 42, 55, 68, 74, 86, 93, 99];
    let want: BTreeSet<(u64, u64)> = (0..100).map(|q| (0, q)).collect();
    let exact = receivers.iter().all(|r| per.get(r) == Some(&want));
    let ratio = report.delivery.values().next().and_then(|d| d.ratio());
    let ok = exact && dups == 0 && ratio == Some(1.0);
    let counts: Vec<usize> = receivers.iter().map(|r| per.get(r).map_or(0, |p| p.len())).collect();
    let ratio = ratio.map_or("n/a".to_string(), |r| format!("{r:.3}"));
    outcome(ok, format!("per-receiver distinct deliveries {counts:?}, {dups} duplicates, ratio {ratio}"))
}

// 7, 8
fn mesh_sweep(trace: &[TraceEvent]) -> (Outcome, Outcome) {
    let sum = of_kind(trace, "invariant_summary").next().expect("summary");
    let d = &sum.detail;
    let checks = d["checks"].as_u64().unwrap();
    let holes = d["black_holes"].as_u64().unwrap();
    let bad = d["active_path_violations"].as_u64().unwrap();
    let joins = of_kind(trace, "join_result").filter(|e| e.detail["outcome"] == "joined").count();
    let handoffs = of_kind(trace, "handoff").count();
    let failovers = of_kind(trace, "path_failover").count();
    let sweeping = d["enabled"] == true && checks > 0;
    (
        outcome(sweeping && holes == 0, format!("{holes} black holes over {checks} node checks")),
        outcome(
            sweeping && bad == 0 && joins > 0,
            format!("{bad} active-path violations; {joins} joins, {handoffs} handoffs, {failovers} failovers"),
        ),
    )
}

// 9
fn stage_order(traces: &[&[TraceEvent]]) -> Outcome {
    let mut joins = 0;
    let mut bad = 0;
    for trace in traces {
        let mut seq: BTreeMap<(u32, u64), Vec<u64>> = BTreeMap::new();
        for e in of_kind(trace, "join_stage") {
            seq.entry((e.node.unwrap().0, e.detail["join"].as_u64().unwrap()))
                .or_default()
                .push(e.detail["stage"].as_u64().unwrap());
        }
        for stages in seq.values() {
            joins += 1;
            let mut distinct: Vec<u64> = stages.clone();
            distinct.dedup();
            let ordered = distinct.windows(2).all(|w| w[1] == w[0] + 1) && distinct[0] == 0;
            if !ordered {
                bad += 1;
            }
        }
    }
    outcome(bad == 0 && joins > 0, format!("{bad} of {joins} join attempts out of order"))
}

// 10, 11
fn popularity_and_partition() -> (Outcome, Outcome) {
    let mut s = popular_far_cluster(1, 16, 200.0);
    s.debug.invariant_sweep = true;
    let rect = rr_rect(&s, GROUP);
    let cut = 130.0;
    let newcomer = cluster()[16];
    s.workload.push(Directive::Partition { at_s: cut, rect });
    s.workload.push(join(140.0, newcomer));
    let (trace, _) = run(&s);
    let promote = of_kind(&trace, "pop_promote").next().map(|e| e.t.as_secs());
    let members: BTreeSet<u32> = cluster().into_iter().collect();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for e in of_kind(&trace, "join_result").filter(|e| e.detail["outcome"] == "joined") {
        let t = e.t.as_secs();
        if !members.contains(&e.node.unwrap().0) || t >= cut {
            continue;
        }
        let h = e.detail["hops"].as_f64().unwrap();
        match promote {
            Some(p) if t > p => after.push(h),
            _ => before.push(h),
        }
    }
    let c10 = outcome(
        promote.is_some() && !before.is_empty() && !after.is_empty() && mean(&after) < mean(&before),
        format!(
            "promotion at {} s; mean join hops {:.2} before ({} joins) vs {:.2} after ({} joins)",
            promote.map_or("never".to_string(), |t| format!("{t:.1}")),
            mean(&before),
            before.len(),
            mean(&after),
            after.len()
        ),
    );
    let killed = of_kind(&trace, "partition").next().map_or(0, |e| e.detail["nodes"].as_u64().unwrap());
    let joined = of_kind(&trace, "join_result")
        .any(|e| e.node == Some(NodeId(newcomer)) && e.detail["outcome"] == "joined" && e.t.as_secs() > 140.0);
    let received = of_kind(&trace, "data_deliver").filter(|e| e.node == Some(NodeId(newcomer))).count();
    let c11 = outcome(
        promote.is_some_and(|p| p < cut) && killed > 0 && joined && received > 0,
        format!("{killed} rendezvous nodes removed at {cut} s; newcomer joined={joined}, delivered {received} packets"),
    );
    (c10, c11)
}

// 12
fn small_world() -> Outcome {
    let base = |contacts: bool| {
        let mut s = Scenario::minimal(1000, 4400.0, 4400.0, 90.0, 12);
        s.mobility.model = MobilityModel::RandomWaypoint;
        s.mobility.speed_min = 2.0;
        s.mobility.speed_max = 8.0;
        s.mobility.pause_time = 2.0;
        s.mobility.stop_at_s = Some(60.0);
        s.contacts.enabled = contacts;
        s.contacts.a_half = 0.1;
        s.workload.push(Directive::RouteQueries {
            at_s: 5.0,
            until_s: 90.0,
            rate_hz: 10.0,
            rounds: 1,
        });
        s
    };
    let (_, on) = run(&base(true));
    let (_, off) = run(&base(false));
    let (z, c) = (off.overlay_zone.unwrap(), on.overlay_contacts.unwrap());
    let drop = (z.clustering - c.clustering) / z.clustering;
    let ok = c.avg_path_length < z.avg_path_length && drop < 0.2;
    outcome(
        ok,
        format!(
            "path length {:.3} -> {:.3} with contacts (+{} edges), clustering {:.3} -> {:.3} ({:.1}% lower)",
            z.avg_path_length,
            c.avg_path_length,
            c.edges.saturating_sub(z.edges),
            z.clustering,
            c.clustering,
            100.0 * drop
        ),
    )
}

// 13
fn determinism() -> Outcome {
    let mut s = mobile_multicast(13, 120, 1500.0, 60.0, 6);
    s.workload.push(Directive::RouteQueries {
        at_s: 5.0,
        until_s: 60.0,
        rate_hz: 2.0,
        rounds: 2,
    });
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let r = run_scenario(&s, None).unwrap();
        emit(Some(&s), &r, &out).unwrap();
        files.push((
            std::fs::read(out.join("trace.jsonl")).unwrap(),
            std::fs::read(out.join("metrics.csv")).unwrap(),
        ));
    }
    let same = files[0] == files[1];
    outcome(same, format!("trace {} bytes, metrics {} bytes, identical={same}", files[0].0.len(), files[0].1.len()))
}

// 14
fn mesh_distance_report() -> Outcome {
    let s = mobile_multicast(14, 1000, 4400.0, 90.0, 30);
    let (trace, report) = run(&s);
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for e in of_kind(&trace, "mesh_distance") {
        *hist.entry(e.detail["hops"].as_u64().unwrap()).or_default() += 1;
    }
    let m = report.mesh_distance;
    outcome(
        true,
        format!(
            "hops to nearest mesh point: n={} mean={:.2} p50={} p90={} histogram {hist:?} (reference value 2.5 hops from an Internet topology; not comparable)",
            m.count, m.mean, m.p50, m.p90
        ),
    )
}

fn main() {
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let want = |n: u32| filter.is_none_or(|f| f == n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let secs = |s| Some(Duration::from_secs(s));
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        verdict(n, name, o.ok, &o.detail);
        results.push((n, name, o));
    };
    if want(1) {
        record(1, "zone oracle", timed(secs(60), zone_oracle));
    }
    if want(2) {
        record(2, "contact route bound", timed(secs(120), contact_route_bound));
    }
    if want(3) {
        record(3, "selection formula", timed(None, selection_properties));
    }
    if want(4) {
        record(4, "rr partition", timed(None, rr_partition));
    }
    if want(5) {
        record(5, "sds band", timed(secs(120), sds_band));
    }
    if want(6) {
        record(6, "exactly-once delivery", timed(secs(30), exactly_once_delivery));
    }
    if want(7) || want(8) || want(9) {
        let t0 = Instant::now();
        let mut s = mobile_multicast(7, 200, 2000.0, 200.0, 15);
        s.debug.invariant_sweep = true;
        let (trace, _) = run(&s);
        let el = t0.elapsed();
        let (mut c7, c8) = mesh_sweep(&trace);
        if el > Duration::from_secs(300) {
            c7.ok = false;
        }
        c7.detail = format!("{} [{:.1} s]", c7.detail, el.as_secs_f64());
        if want(7) {
            record(7, "no black holes", c7);
        }
        if want(8) {
            record(8, "exactly one active path", c8);
        }
        if want(9) {
            let (far, _) = run(&popular_far_cluster(9, 20, 150.0));
            record(9, "discovery stage order", timed(None, || stage_order(&[&trace, &far])));
        }
    }
    if want(10) || want(11) {
        let t0 = Instant::now();
        let (mut c10, c11) = popularity_and_partition();
        let el = t0.elapsed();
        if el > Duration::from_secs(60) {
            c10.ok = false;
        }
        c10.detail = format!("{} [{:.1} s]", c10.detail, el.as_secs_f64());
        if want(10) {
            record(10, "popularity adaptation", c10);
        }
        if want(11) {
            record(11, "partition autonomy", c11);
        }
    }
    if want(12) {
        record(12, "small-world directionality", timed(secs(300), small_world));
    }
    if want(13) {
        record(13, "determinism", timed(None, determinism));
    }
    if want(14) {
        record(14, "mesh distance (exploratory)", timed(None, mesh_distance_report));
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.ok).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {failed:?}", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
