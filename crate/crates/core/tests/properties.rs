use std::collections::BTreeSet;
use std::rc::Rc;

use mcastsim::contacts::splice_route;
use mcastsim::kernel::queue::EventQueue;
use mcastsim::multicast::{path_stability, rank_candidates, Candidate, CandidateSource};
use mcastsim::overlay::OverlayGraph;
use mcastsim::rendezvous::AddressGrid;
use mcastsim::zone::{intra_zone_route, LinkStateAdvert, LinkStateDb, ZoneTable};
use mcastsim::{NodeId, Position, SimTime};
use proptest::prelude::*;

mod common;

fn lsa(origin: u32, neighbors: Vec<NodeId>) -> Rc<LinkStateAdvert> {
    Rc::new(LinkStateAdvert {
        origin: NodeId(origin),
        seq: 1,
        neighbors,
        position: Position::new(0.0, 0.0),
        energy_left: 1.0,
        drain: 1.0,
        contact_count: 0,
        sds_prefix: None,
        local_sds_groups: Vec::new(),
        mesh: Vec::new(),
    })
}

fn arb_graph() -> impl Strategy<Value = Vec<Vec<NodeId>>> {
    (2usize..24).prop_flat_map(|n| {
        proptest::collection::vec((0..n as u32, 0..n as u32), 0..n * 3).prop_map(move |edges| {
            let mut adj = vec![BTreeSet::new(); n];
            for (a, b) in edges {
                if a != b {
                    adj[a as usize].insert(NodeId(b));
                    adj[b as usize].insert(NodeId(a));
                }
            }
            adj.into_iter().map(|s| s.into_iter().collect()).collect()
        })
    })
}

fn arb_candidate() -> impl Strategy<Value = Candidate> {
    (proptest::collection::vec(0u32..8, 1..6), 0.0f64..=1.0, 0usize..4).prop_map(|(r, s, src)| Candidate {
        route: r.into_iter().map(NodeId).collect(),
        stability: s,
        source: [
            CandidateSource::Graft,
            CandidateSource::Adv,
            CandidateSource::ServerRoute,
            CandidateSource::Discovered,
        ][src],
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn zone_table_matches_bfs(adj in arb_graph(), radius in 1u32..4, owner_pick in 0usize..64) {
        let owner = NodeId((owner_pick % adj.len()) as u32);
        let mut db = LinkStateDb::default();
        for (i, nb) in adj.iter().enumerate() {
            if i != owner.index() {
                db.accept(lsa(i as u32, nb.clone()), SimTime::ZERO);
            }
        }
        let table = ZoneTable::compute(owner, radius, &adj[owner.index()], &db);
        let expect = common::bfs(&adj, owner, radius);
        let got: Vec<(NodeId, u32)> = table.members.iter().map(|(n, m)| (*n, m.hops)).collect();
        let want: Vec<(NodeId, u32)> = expect.into_iter().collect();
        prop_assert_eq!(got, want);
        for (&m, info) in &table.members {
            let route = intra_zone_route(&table, m).expect("member has a route");
            prop_assert_eq!(route.len() as u32, info.hops);
            prop_assert_eq!(route[0], info.next_hop);
            prop_assert_eq!(*route.last().unwrap(), m);
            prop_assert!(adj[owner.index()].contains(&route[0]));
            for w in route.windows(2) {
                prop_assert!(adj[w[0].index()].contains(&w[1]));
            }
        }
    }

    #[test]
    fn ranking_is_bounded_sorted_and_loop_free(cands in proptest::collection::vec(arb_candidate(), 0..12), max in 1usize..5) {
        let ranked = rank_candidates(cands, max);
        prop_assert!(ranked.len() <= max);
        for w in ranked.windows(2) {
            prop_assert!(w[0].stability >= w[1].stability);
        }
        let routes: BTreeSet<_> = ranked.iter().map(|c| c.route.clone()).collect();
        prop_assert_eq!(routes.len(), ranked.len());
        for c in &ranked {
            let uniq: BTreeSet<_> = c.route.iter().collect();
            prop_assert_eq!(uniq.len(), c.route.len());
        }
    }

    #[test]
    fn path_stability_is_bottleneck(links in proptest::collection::vec(0.0f64..=1.0, 0..10)) {
        let s = path_stability(&links);
        prop_assert!((0.0..=1.0).contains(&s));
        for l in &links {
            prop_assert!(s <= *l);
        }
    }

    #[test]
    fn spliced_routes_keep_endpoints(len in 3usize..10, at_pick in 0usize..10, back in 1usize..10, extra in proptest::collection::vec(100u32..110, 0..4)) {
        let route: Vec<NodeId> = (0..len as u32).map(NodeId).collect();
        let at = at_pick % (len - 1);
        let rejoin = (at + 1 + back % (len - at - 1)).min(len - 1);
        let mut detour = vec![route[at]];
        detour.extend(extra.iter().map(|&n| NodeId(n)));
        detour.push(route[rejoin]);
        let out = splice_route(&route, at, &detour).expect("valid splice");
        prop_assert_eq!(out.first(), route.first());
        prop_assert_eq!(out.last(), route.last());
        let uniq: BTreeSet<_> = out.iter().collect();
        prop_assert_eq!(uniq.len(), out.len());
    }

    #[test]
    fn every_position_has_one_region(cols in 1u32..9, rows in 1u32..9, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let grid = AddressGrid::new(2000.0, 1000.0, cols, rows, 8, 16).unwrap();
        let p = Position::new(x * 2000.0, y * 1000.0);
        let owner = grid.prefix_of_position(&p);
        prop_assert!(owner < grid.region_count());
        prop_assert!(grid.is_inside(owner, &p));
        let claims = grid.regions().filter(|r| grid.is_inside(r.prefix, &p)).count();
        prop_assert_eq!(claims, 1);
    }

    #[test]
    fn queue_pops_in_time_order(times in proptest::collection::vec(0u64..1_000_000, 1..60)) {
        let mut q = EventQueue::new();
        for (i, t) in times.iter().enumerate() {
            q.schedule(i, SimTime::from_secs(*t as f64 / 1000.0)).unwrap();
        }
        let mut last = SimTime::ZERO;
        let mut seen = 0;
        while let Some((t, i)) = q.pop_until(SimTime::from_secs(2000.0)) {
            prop_assert!(t >= last);
            prop_assert_eq!(t, SimTime::from_secs(times[i] as f64 / 1000.0));
            last = t;
            seen += 1;
        }
        prop_assert_eq!(seen, times.len());
    }

    #[test]
    fn clustering_is_a_fraction(adj in arb_graph()) {
        let mut g = OverlayGraph::new(adj.len());
        for (a, nb) in adj.iter().enumerate() {
            for b in nb {
                g.add_edge(a, b.index());
            }
        }
        let c = g.clustering();
        prop_assert!((0.0..=1.0).contains(&c));
        let (l, _) = g.avg_path_length(100, 50, 1);
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn sim_time_round_trips_microseconds(us in 0u64..10_000_000_000) {
        let t = SimTime::from_secs(us as f64 / 1e6);
        prop_assert_eq!(SimTime::from_secs(t.as_secs()), t);
    }
}
