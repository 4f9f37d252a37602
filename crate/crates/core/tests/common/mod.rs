#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use mcastsim::mobility::MobilityModel;
use mcastsim::scenario::{Directive, PlacementMode};
use mcastsim::{GroupAddress, NodeId, Rect, Scenario, TraceEvent};

pub const GROUP: GroupAddress = GroupAddress { prefix: 9, suffix: 1 };

pub fn of_kind<'a>(trace: &'a [TraceEvent], kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
    trace.iter().filter(move |e| e.kind == kind)
}

pub fn join(at_s: f64, node: u32) -> Directive {
    Directive::Join {
        at_s,
        node,
        group: GROUP,
    }
}

pub fn sender(at_s: f64, node: u32, data_at: f64, rate_hz: f64, count: u32) -> Vec<Directive> {
    vec![
        Directive::StartSender {
            at_s,
            node,
            group: GROUP,
        },
        Directive::SendData {
            at_s: data_at,
            node,
            group: GROUP,
            rate_hz,
            count,
            size_bytes: 512,
        },
    ]
}

/// Static 10x10 lattice, one sender, ten receivers, `count` packets.
pub fn exactly_once(seed: u64, count: u32) -> Scenario {
    let mut s = Scenario::minimal(100, 1000.0, 1000.0, 60.0, seed);
    s.placement.mode = PlacementMode::Lattice;
    s.debug.invariant_sweep = true;
    s.workload = sender(5.0, 0, 20.0, 5.0, count);
    for n in [11, 23, 37, 42, 55, 68, 74, 86, 93, 99] {
        s.workload.push(join(8.0, n));
    }
    s
}

/// Mobile random-waypoint network with one sender and staggered receivers.
pub fn mobile_multicast(seed: u64, nodes: usize, side_m: f64, duration_s: f64, receivers: u32) -> Scenario {
    let mut s = Scenario::minimal(nodes, side_m, side_m, duration_s, seed);
    s.mobility.model = MobilityModel::RandomWaypoint;
    s.mobility.speed_min = 1.0;
    s.mobility.speed_max = 5.0;
    s.mobility.pause_time = 5.0;
    s.workload = sender(5.0, 0, 15.0, 2.0, ((duration_s - 20.0) * 2.0) as u32);
    let stride = (nodes as u32 - 1) / receivers;
    for i in 0..receivers {
        s.workload.push(join(10.0 + 2.0 * i as f64, 1 + i * stride));
    }
    s
}

/// Lattice node at column `c`, row `r` in the 20x10 wide-area layout.
pub fn wide_node(c: u32, r: u32) -> u32 {
    c + 20 * r
}

/// Receiver cluster in the corner opposite the group's rendezvous region.
pub fn cluster() -> Vec<u32> {
    (6..10).flat_map(|r| (15..20).map(move |c| wide_node(c, r))).collect()
}

/// 200 nodes on a 20x10 lattice over 3000x1500 m. The group's rendezvous
/// region is at the west end; the sender sits mid-area and its adverts do not
/// reach the receiver cluster in the east. Cluster members join every 6 s.
pub fn popular_far_cluster(seed: u64, joiners: usize, duration_s: f64) -> Scenario {
    let mut s = Scenario::minimal(200, 3000.0, 1500.0, duration_s, seed);
    s.placement.mode = PlacementMode::Lattice;
    s.mcast.pop_th = 2.0;
    s.workload = sender(5.0, wide_node(10, 5), 10.0, 2.0, ((duration_s - 15.0) * 2.0) as u32);
    for (i, n) in cluster().into_iter().take(joiners).enumerate() {
        s.workload.push(join(15.0 + 6.0 * i as f64, n));
    }
    s
}

pub fn rr_rect(s: &Scenario, g: GroupAddress) -> Rect {
    s.grid().unwrap().rr_of_group(g).rect
}

/// Hop distances from `src` over an adjacency list, up to `limit` hops.
pub fn bfs(adj: &[Vec<NodeId>], src: NodeId, limit: u32) -> BTreeMap<NodeId, u32> {
    let mut dist = BTreeMap::new();
    dist.insert(src, 0);
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        let d = dist[&u];
        if d == limit {
            continue;
        }
        for &v in &adj[u.index()] {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                e.insert(d + 1);
                q.push_back(v);
            }
        }
    }
    dist.remove(&src);
    dist
}

/// Distinct `(src, seq)` packets delivered per receiver, plus duplicate count.
pub fn deliveries(trace: &[TraceEvent]) -> (BTreeMap<u32, BTreeSet<(u64, u64)>>, u64) {
    let mut per: BTreeMap<u32, BTreeSet<(u64, u64)>> = BTreeMap::new();
    let mut dups = 0;
    for e in of_kind(trace, "data_deliver") {
        let key = (e.detail["src"].as_u64().unwrap(), e.detail["seq"].as_u64().unwrap());
        if !per.entry(e.node.unwrap().0).or_default().insert(key) {
            dups += 1;
        }
    }
    (per, dups)
}

pub fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!("{} criterion {n:>2} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
}
