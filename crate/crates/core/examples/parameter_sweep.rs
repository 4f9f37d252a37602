//! Sweeps the zone radius over a small static network and prints the
//! combined metrics table written by the harness.

use mcastsim::harness::sweep;
use mcastsim::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = Scenario::minimal(80, 1000.0, 1000.0, 15.0, 11).to_toml_string();
    let out = std::env::temp_dir().join("mcastsim-sweep-example");
    let values: Vec<String> = ["1", "2", "3"].iter().map(|v| v.to_string()).collect();
    let runs = sweep(&base, "zone.radius_R", &values, 2, &out)?;
    println!("{runs} runs written under {}", out.display());
    let table = std::fs::read_to_string(out.join("sweep.csv"))?;
    for line in table.lines().filter(|l| l.starts_with("param") || l.contains("control_packets,zone_link_state")) {
        println!("{line}");
    }
    Ok(())
}
