//! Builds a static lattice, lets link-state adverts settle and prints one
//! node's routing zone, its border set and an intra-zone source route.

use mcastsim::scenario::PlacementMode;
use mcastsim::sim::World;
use mcastsim::zone::intra_zone_route;
use mcastsim::{NodeId, Scenario, SimTime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut s = Scenario::minimal(64, 1200.0, 1200.0, 10.0, 1);
    s.placement.mode = PlacementMode::Lattice;
    s.zone.radius = 2;
    let mut w = World::new(&s)?;
    w.run_until(SimTime::from_secs(10.0))?;

    let me = NodeId(27);
    let zone = &w.node(me).zone;
    println!("zone of node {me} (R = {}): {} members", zone.radius, zone.members.len());
    for (n, m) in &zone.members {
        println!("  {n:>3}  hops {}  via {}", m.hops, m.next_hop);
    }
    println!("border nodes: {:?}", zone.border_set.iter().map(|n| n.0).collect::<Vec<_>>());
    if let Some(far) = zone.border_set.iter().next() {
        let route = intra_zone_route(zone, *far).expect("border node is in the zone");
        println!("route to {far}: {:?}", route.iter().map(|n| n.0).collect::<Vec<_>>());
    }
    Ok(())
}
