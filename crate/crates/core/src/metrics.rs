//! Run metrics, computed from the event trace alone so that a saved trace
//! reproduces the online report exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde_json::Value;

use crate::kernel::trace::TraceEvent;
use crate::overlay::{OverlayGraph, OverlayStats};

/// Pair sampling for overlay path lengths: all pairs up to this many nodes.
pub const ALL_PAIRS_BELOW: usize = 200;
pub const PATH_SAMPLES: usize = 1000;
const OVERLAY_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pct = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: pct(0.5),
            p90: pct(0.9),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupDelivery {
    pub expected: u64,
    pub delivered: u64,
    /// Deliveries of a packet a receiver had already delivered.
    pub duplicates: u64,
}

impl GroupDelivery {
    /// Fraction of expected (receiver, packet) pairs delivered; `None` if nothing was expected.
    pub fn ratio(&self) -> Option<f64> {
        (self.expected > 0).then(|| self.delivered as f64 / self.expected as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// Keyed by `prefix.suffix`.
    pub delivery: BTreeMap<String, GroupDelivery>,
    pub control_packets: BTreeMap<String, u64>,
    pub data_packets: u64,
    pub join_hops: Summary,
    pub join_latency_s: Summary,
    pub joins_by_stage: BTreeMap<u8, u64>,
    pub join_retries: u64,
    pub mesh_distance: Summary,
    pub handoffs: u64,
    pub handoff_depth: Summary,
    pub failovers: u64,
    pub local_repairs: u64,
    /// `(time_s, prefix) -> count`.
    pub sds_series: BTreeMap<(u64, u32), u32>,
    pub route_queries: u64,
    pub routes_found: u64,
    pub route_hops: Summary,
    pub route_latency_s: Summary,
    pub overlay_zone: Option<OverlayStats>,
    pub overlay_contacts: Option<OverlayStats>,
    pub contact_count: Summary,
    pub invariant_violations: u64,
    pub delivery_failures: BTreeMap<String, u64>,
}

fn group_key(v: &Value) -> String {
    format!("{}.{}", v["prefix"].as_u64().unwrap_or(0), v["suffix"].as_u64().unwrap_or(0))
}

fn f(v: &Value) -> Option<f64> {
    v.as_f64()
}

impl MetricsReport {
    pub fn from_trace(events: &[TraceEvent]) -> MetricsReport {
        let mut r = MetricsReport::default();
        // Membership intervals per group and receiver.
        let mut joined: BTreeMap<(String, u32), Vec<(f64, f64)>> = BTreeMap::new();
        let mut failed: BTreeMap<u32, f64> = BTreeMap::new();
        let mut sends: BTreeMap<String, Vec<(u32, u64, f64)>> = BTreeMap::new();
        let mut deliveries: BTreeMap<(String, u32), BTreeMap<(u32, u64), u64>> = BTreeMap::new();
        let (mut hops, mut lat, mut mdist, mut hdepth, mut rhops, mut rlat) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut zones: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut contacts: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut max_node = 0u32;
        let mut grace = 0.0;
        for e in events {
            let t = e.t.as_secs();
            let node = e.node.map(|n| n.0);
            if let Some(n) = node {
                max_node = max_node.max(n);
            }
            let d = &e.detail;
            match e.kind.as_str() {
                "run_start" => grace = d["join_grace_s"].as_f64().unwrap_or(0.0),
                "member_join" => {
                    let ivs = joined.entry((group_key(&d["group"]), node.unwrap_or(0))).or_default();
                    if ivs.last().is_none_or(|iv| iv.1.is_finite()) {
                        ivs.push((t + grace, f64::INFINITY));
                    }
                }
                "member_leave" => {
                    if let Some(iv) = joined
                        .get_mut(&(group_key(&d["group"]), node.unwrap_or(0)))
                        .and_then(|v| v.last_mut())
                    {
                        if iv.1.is_infinite() {
                            iv.1 = t.max(iv.0);
                        }
                    }
                }
                "node_fail" => {
                    failed.entry(node.unwrap_or(0)).or_insert(t);
                }
                "data_send" => {
                    sends.entry(group_key(&d["group"])).or_default().push((
                        node.unwrap_or(0),
                        d["seq"].as_u64().unwrap_or(0),
                        t,
                    ));
                }
                "data_deliver" => {
                    let key = (d["src"].as_u64().unwrap_or(0) as u32, d["seq"].as_u64().unwrap_or(0));
                    *deliveries
                        .entry((group_key(&d["group"]), node.unwrap_or(0)))
                        .or_default()
                        .entry(key)
                        .or_default() += 1;
                }
                "join_result" => match d["outcome"].as_str() {
                    Some("joined") => {
                        hops.extend(f(&d["hops"]));
                        lat.extend(f(&d["latency_s"]));
                        *r.joins_by_stage.entry(d["stage"].as_u64().unwrap_or(0) as u8).or_default() += 1;
                    }
                    Some("retry") => r.join_retries += 1,
                    _ => {}
                },
                "mesh_distance" => mdist.extend(f(&d["hops"])),
                "handoff" => {
                    r.handoffs += 1;
                    hdepth.extend(f(&d["depth"]));
                }
                "path_failover" => r.failovers += 1,
                "local_repair" => r.local_repairs += 1,
                "sds_count" => {
                    if let Some(cs) = d["counts"].as_array() {
                        let tm = e.t.as_secs().round() as u64;
                        for c in cs {
                            let p = c[0].as_u64().unwrap_or(0) as u32;
                            let n = c[1].as_u64().unwrap_or(0) as u32;
                            r.sds_series.insert((tm, p), n);
                        }
                    }
                }
                "route_result" => {
                    r.route_queries += 1;
                    if d["found"].as_bool() == Some(true) {
                        r.routes_found += 1;
                        rhops.extend(f(&d["hops"]));
                        rlat.extend(f(&d["latency_s"]));
                    }
                }
                "tx_summary" => {
                    if let Some(m) = d.as_object() {
                        for (k, v) in m {
                            let c = v.as_u64().unwrap_or(0);
                            if k == "data" {
                                r.data_packets = c;
                            } else {
                                r.control_packets.insert(k.clone(), c);
                            }
                        }
                    }
                }
                "zone_snapshot" => {
                    let ms = d["members"].as_array().map(|a| a.iter().filter_map(|m| m[0].as_u64()).map(|m| m as u32).collect());
                    zones.insert(node.unwrap_or(0), ms.unwrap_or_default());
                }
                "contact_snapshot" => {
                    let cs = d["contacts"].as_array().map(|a| a.iter().filter_map(|m| m[0].as_u64()).map(|m| m as u32).collect());
                    contacts.insert(node.unwrap_or(0), cs.unwrap_or_default());
                }
                "invariant_violation" => r.invariant_violations += 1,
                "delivery_failure" => {
                    let reason = d["reason"].as_str().unwrap_or("unknown").to_string();
                    *r.delivery_failures.entry(reason).or_default() += 1;
                }
                _ => {}
            }
        }
        for (g, ss) in &sends {
            let mut gd = GroupDelivery::default();
            for ((jg, m), ivs) in &joined {
                if jg != g {
                    continue;
                }
                let fail_at = failed.get(m).copied().unwrap_or(f64::INFINITY);
                let got = deliveries.get(&(g.clone(), *m));
                for &(src, seq, ts) in ss {
                    if src == *m || ts >= fail_at || !ivs.iter().any(|&(a, b)| a <= ts && ts < b) {
                        continue;
                    }
                    gd.expected += 1;
                    if let Some(c) = got.and_then(|d| d.get(&(src, seq))) {
                        gd.delivered += 1;
                        gd.duplicates += c - 1;
                    }
                }
            }
            r.delivery.insert(g.clone(), gd);
        }
        r.join_hops = Summary::of(&hops);
        r.join_latency_s = Summary::of(&lat);
        r.mesh_distance = Summary::of(&mdist);
        r.handoff_depth = Summary::of(&hdepth);
        r.route_hops = Summary::of(&rhops);
        r.route_latency_s = Summary::of(&rlat);
        if !zones.is_empty() {
            let n = max_node as usize + 1;
            let (zg, cg) = overlay_graphs(n, &zones, &contacts);
            r.overlay_zone = Some(zg.stats(PATH_SAMPLES, ALL_PAIRS_BELOW, OVERLAY_SEED));
            r.overlay_contacts = Some(cg.stats(PATH_SAMPLES, ALL_PAIRS_BELOW, OVERLAY_SEED));
            let cc: Vec<f64> = zones.keys().map(|n| contacts.get(n).map_or(0, Vec::len) as f64).collect();
            r.contact_count = Summary::of(&cc);
        }
        r
    }

    /// `(metric, key, value)` rows in a stable order.
    pub fn rows(&self) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        let mut push = |m: &str, k: &str, v: String| out.push((m.to_string(), k.to_string(), v));
        let num = |x: f64| format!("{x:.6}");
        for (g, d) in &self.delivery {
            push("delivery_ratio", g, d.ratio().map_or("nan".into(), num));
            push("delivery_expected", g, d.expected.to_string());
            push("delivery_delivered", g, d.delivered.to_string());
            push("delivery_duplicates", g, d.duplicates.to_string());
        }
        for (k, c) in &self.control_packets {
            push("control_packets", k, c.to_string());
        }
        push("control_packets_total", "", self.control_packets.values().sum::<u64>().to_string());
        push("data_packets", "", self.data_packets.to_string());
        let mut summary = |m: &str, s: &Summary| {
            push(m, "count", s.count.to_string());
            push(m, "mean", num(s.mean));
            push(m, "p50", num(s.p50));
            push(m, "p90", num(s.p90));
            push(m, "max", num(s.max));
        };
        summary("join_hops", &self.join_hops);
        summary("join_latency_s", &self.join_latency_s);
        summary("mesh_distance_hops", &self.mesh_distance);
        summary("handoff_depth_hops", &self.handoff_depth);
        summary("route_hops", &self.route_hops);
        summary("route_latency_s", &self.route_latency_s);
        summary("contacts_per_node", &self.contact_count);
        for (s, c) in &self.joins_by_stage {
            push("joins_by_stage", &s.to_string(), c.to_string());
        }
        push("join_retries", "", self.join_retries.to_string());
        push("handoffs", "", self.handoffs.to_string());
        push("path_failovers", "", self.failovers.to_string());
        push("local_repairs", "", self.local_repairs.to_string());
        push("route_queries", "", self.route_queries.to_string());
        push("routes_found", "", self.routes_found.to_string());
        for ((t, p), c) in &self.sds_series {
            push("sds_count", &format!("t={t};prefix={p}"), c.to_string());
        }
        for (name, o) in [("overlay_zone", &self.overlay_zone), ("overlay_contacts", &self.overlay_contacts)] {
            if let Some(o) = o {
                push(name, "avg_path_length", num(o.avg_path_length));
                push(name, "clustering", num(o.clustering));
                push(name, "component_size", o.component_size.to_string());
                push(name, "disconnected", o.disconnected.to_string());
                push(name, "edges", o.edges.to_string());
            }
        }
        for (reason, c) in &self.delivery_failures {
            push("delivery_failures", reason, c.to_string());
        }
        push("invariant_violations", "", self.invariant_violations.to_string());
        out
    }

    /// Writes `metric,key,value` CSV; an empty trace gives a header-only file.
    pub fn write_csv<W: Write>(&self, w: W, empty: bool) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "metric,key,value")?;
        if !empty {
            for (m, k, v) in self.rows() {
                writeln!(w, "{m},{k},{v}")?;
            }
        }
        w.flush()
    }
}

/// Zone-only and zone+contacts overlays from final snapshots.
pub fn overlay_graphs(
    n: usize,
    zones: &BTreeMap<u32, Vec<u32>>,
    contacts: &BTreeMap<u32, Vec<u32>>,
) -> (OverlayGraph, OverlayGraph) {
    let mut zg = OverlayGraph::new(n);
    let alive: BTreeSet<u32> = zones.keys().copied().collect();
    for (a, ms) in zones {
        for b in ms.iter().filter(|b| alive.contains(b)) {
            zg.add_edge(*a as usize, *b as usize);
        }
    }
    let mut cg = zg.clone();
    for (a, cs) in contacts {
        for b in cs.iter().filter(|b| alive.contains(b)) {
            cg.add_edge(*a as usize, *b as usize);
        }
    }
    (zg, cg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SimTime;
    use crate::NodeId;
    use serde_json::json;

    fn ev(t: f64, node: u32, kind: &str, detail: Value) -> TraceEvent {
        TraceEvent {
            t: SimTime::from_secs(t),
            node: Some(NodeId(node)),
            kind: kind.into(),
            detail,
        }
    }

    #[test]
    fn summary_percentiles() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((s.count, s.mean, s.p50, s.max), (5, 3.0, 3.0, 5.0));
        assert_eq!(Summary::of(&[]), Summary::default());
    }

    #[test]
    fn delivery_counts_only_while_joined() {
        let g = json!({"prefix": 1, "suffix": 2});
        let evs = vec![
            ev(0.0, 1, "member_join", json!({"group": g})),
            ev(1.0, 0, "data_send", json!({"group": g, "seq": 0})),
            ev(1.1, 1, "data_deliver", json!({"group": g, "src": 0, "seq": 0, "hops": 1})),
            ev(2.0, 1, "member_leave", json!({"group": g})),
            ev(3.0, 0, "data_send", json!({"group": g, "seq": 1})),
        ];
        let r = MetricsReport::from_trace(&evs);
        let d = &r.delivery["1.2"];
        assert_eq!((d.expected, d.delivered, d.duplicates), (1, 1, 0));
        assert_eq!(d.ratio(), Some(1.0));
    }

    #[test]
    fn duplicates_do_not_inflate_ratio() {
        let g = json!({"prefix": 0, "suffix": 1});
        let evs = vec![
            ev(0.0, 2, "member_join", json!({"group": g})),
            ev(1.0, 0, "data_send", json!({"group": g, "seq": 0})),
            ev(1.1, 2, "data_deliver", json!({"group": g, "src": 0, "seq": 0, "hops": 2})),
            ev(1.2, 2, "data_deliver", json!({"group": g, "src": 0, "seq": 0, "hops": 3})),
        ];
        let d = &MetricsReport::from_trace(&evs).delivery["0.1"];
        assert_eq!((d.delivered, d.duplicates), (1, 1));
    }

    #[test]
    fn empty_trace_is_header_only() {
        let mut buf = Vec::new();
        MetricsReport::from_trace(&[]).write_csv(&mut buf, true).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,key,value\n");
    }
}
