//! Writes a run's artifacts to disk, reloads the JSON-lines trace and checks
//! that recomputing the metrics offline gives the same report.

use mcastsim::harness::{emit, run_scenario, stats};
use mcastsim::scenario::Directive;
use mcastsim::{GroupAddress, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = GroupAddress::new(3, 2);
    let mut s = Scenario::minimal(60, 900.0, 900.0, 30.0, 21);
    s.workload.push(Directive::StartSender { at_s: 2.0, node: 5, group: g });
    s.workload.push(Directive::SendData {
        at_s: 12.0,
        node: 5,
        group: g,
        rate_hz: 4.0,
        count: 40,
        size_bytes: 256,
    });
    for n in [17, 33, 48] {
        s.workload.push(Directive::Join { at_s: 6.0, node: n, group: g });
    }
    let run = run_scenario(&s, None)?;
    let out = std::env::temp_dir().join("mcastsim-trace-example");
    emit(Some(&s), &run, &out)?;
    let offline = stats(&out.join("trace.jsonl"), &out.join("offline"))?;
    println!("{} events in {}", run.trace.len(), out.join("trace.jsonl").display());
    println!("offline metrics identical: {}", offline == run.report);
    let mut kinds = std::collections::BTreeMap::<&str, usize>::new();
    for e in &run.trace {
        *kinds.entry(e.kind.as_str()).or_default() += 1;
    }
    for (k, n) in kinds {
        println!("  {k:<20} {n}");
    }
    Ok(())
}
