//! One sender and ten receivers on a static lattice: runs the full join and
//! data path and prints per-receiver delivery and join statistics.

use mcastsim::harness::run_scenario;
use mcastsim::scenario::{Directive, PlacementMode};
use mcastsim::{GroupAddress, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = GroupAddress::new(9, 1);
    let mut s = Scenario::minimal(100, 1000.0, 1000.0, 60.0, 5);
    s.placement.mode = PlacementMode::Lattice;
    s.workload.push(Directive::StartSender { at_s: 5.0, node: 0, group: g });
    s.workload.push(Directive::SendData {
        at_s: 20.0,
        node: 0,
        group: g,
        rate_hz: 5.0,
        count: 100,
        size_bytes: 512,
    });
    for n in [11, 23, 37, 42, 55, 68, 74, 86, 93, 99] {
        s.workload.push(Directive::Join { at_s: 8.0, node: n, group: g });
    }

    let run = run_scenario(&s, None)?;
    let r = &run.report;
    for (group, d) in &r.delivery {
        println!("group {group}: {}/{} delivered, {} duplicates, ratio {:.3}", d.delivered, d.expected, d.duplicates, d.ratio().unwrap_or(0.0));
    }
    println!("joins by stage: {:?}", r.joins_by_stage);
    println!("join hops: mean {:.2}, max {:.0}", r.join_hops.mean, r.join_hops.max);
    println!("join latency: mean {:.3} s", r.join_latency_s.mean);
    println!("{} trace events", run.trace.len());
    Ok(())
}
