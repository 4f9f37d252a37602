//! Runs a mobile network with background route discovery and lists the
//! contacts each node keeps beyond its zone, plus the selection probability
//! for a few hypothetical candidates.

use mcastsim::contacts::{contact_bound, selection_probability, SelectionInputs, SelectionParams};
use mcastsim::mobility::MobilityModel;
use mcastsim::scenario::Directive;
use mcastsim::sim::{Params, World};
use mcastsim::{Scenario, SimTime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut s = Scenario::minimal(300, 2500.0, 2500.0, 40.0, 3);
    s.mobility.model = MobilityModel::RandomWaypoint;
    s.workload.push(Directive::RouteQueries {
        at_s: 5.0,
        until_s: 40.0,
        rate_hz: 5.0,
        rounds: 1,
    });
    let mut w = World::new(&s)?;
    w.run_until(SimTime::from_secs(40.0))?;

    let bound = contact_bound(s.zone.radius);
    let total: usize = w.nodes().iter().map(|n| n.contacts.len()).sum();
    println!("{total} contacts across {} nodes (route bound {bound} hops)", w.nodes().len());
    for n in w.nodes().iter().filter(|n| !n.contacts.is_empty()).take(5) {
        for c in n.contacts.values() {
            println!("  node {:>3} -> contact {:>3}: {} hops, S = {:.2}", n.id, c.contact, c.hops(), c.s_est);
        }
    }

    let params: SelectionParams = Params::resolve(&s).selection;
    for (s_est, a_est, z) in [(0.9, 1.0, 5), (0.5, 1.0, 5), (0.9, 0.1, 5), (0.9, 1.0, 20)] {
        let p = selection_probability(
            &SelectionInputs {
                e_est: params.e_half,
                s_est,
                a_est,
                z_est: z,
            },
            &params,
        );
        println!("S = {s_est:.1}  A = {a_est:.1}  Z = {z:>2}  ->  p = {p:.3}");
    }
    Ok(())
}
