//! Moves two random-waypoint nodes, records when their link is up and
//! estimates the link's availability from the observed up-intervals.

use mcastsim::mobility::{link_availability, LinkHistory, MobilityConfig, MobilityModel, Mover};
use mcastsim::{NodeId, Position, SimTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = MobilityConfig {
        model: MobilityModel::RandomWaypoint,
        speed_min: 1.0,
        speed_max: 5.0,
        pause_time: 2.0,
        ..MobilityConfig::default()
    };
    let (w, h, range) = (600.0, 600.0, 250.0);
    let mut a = Mover::new(&cfg, Position::new(100.0, 100.0), w, h, ChaCha8Rng::seed_from_u64(1));
    let mut b = Mover::new(&cfg, Position::new(200.0, 150.0), w, h, ChaCha8Rng::seed_from_u64(2));
    let mut link = LinkHistory::new(NodeId(1), cfg.power_ring_capacity);

    for t in 0..=3600u32 {
        let now = SimTime::from_secs(t as f64);
        let (pa, pb) = (a.position(), b.position());
        let up = pa.distance(&pb) <= range;
        if up && !link.is_up() {
            link.link_up(now);
        } else if !up && link.is_up() {
            link.link_down(now);
        }
        if t % 600 == 0 {
            println!("t={t:>3}s  a=({:>5.1},{:>5.1})  b=({:>5.1},{:>5.1})  link {}", pa.x, pa.y, pb.x, pb.y, if up { "up" } else { "down" });
        }
        a.step(&cfg, 1.0);
        b.step(&cfg, 1.0);
    }

    let end = SimTime::from_secs(3600.0);
    let durations: Vec<f64> = link.completed_durations().collect();
    println!("{} completed up-intervals: {:?}", durations.len(), durations);
    for horizon in [5.0, 30.0, 120.0] {
        let a = link_availability([&link], horizon, end, cfg.availability_min_samples, cfg.availability_prior);
        println!("P(link lasts {horizon:>5.0} s) ~ {a:.2}");
    }
}
