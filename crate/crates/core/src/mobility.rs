//! Node movement, the signal-strength relative mobility metric, and the
//! empirical link-availability / stability estimators used for contact selection.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
pub use crate::geo::Position;
use crate::time::SimTime;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityModel {
    #[default]
    Stationary,
    RandomWalk,
    RandomWaypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityConfig {
    pub model: MobilityModel,
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_time: f64,
    /// Movement update period; for the random walk also the heading-change period.
    pub step_interval: f64,
    /// Standard deviation of Gaussian noise on positions reported to protocols.
    pub position_noise_m: f64,
    /// Nodes stop moving at this time (a mobile warm-up followed by a static phase).
    pub stop_at_s: Option<f64>,
    pub availability_min_samples: usize,
    pub availability_prior: f64,
    pub power_ring_capacity: usize,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            model: MobilityModel::Stationary,
            speed_min: 1.0,
            speed_max: 5.0,
            pause_time: 0.0,
            step_interval: 1.0,
            position_noise_m: 0.0,
            stop_at_s: None,
            availability_min_samples: 5,
            availability_prior: 0.5,
            power_ring_capacity: 8,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return Err(SimError::Config(
                "mobility requires 0 <= speed_min <= speed_max".into(),
            ));
        }
        if !(self.pause_time >= 0.0) {
            return Err(SimError::Config("mobility.pause_time must be >= 0".into()));
        }
        if !(self.step_interval > 0.0) {
            return Err(SimError::Config("mobility.step_interval must be > 0".into()));
        }
        if !(self.position_noise_m >= 0.0) {
            return Err(SimError::Config("mobility.position_noise_m must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.availability_prior) {
            return Err(SimError::Config("mobility.availability_prior must be in [0,1]".into()));
        }
        if self.power_ring_capacity < 2 {
            return Err(SimError::Config("mobility.power_ring_capacity must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Motion {
    Still,
    Walk { heading: f64, speed: f64, until_turn: f64 },
    Waypoint { target: Position, speed: f64, pause_left: f64 },
}

/// Per-node movement state with its own random stream.
#[derive(Debug, Clone)]
pub struct Mover {
    pos: Position,
    width: f64,
    height: f64,
    motion: Motion,
    rng: ChaCha8Rng,
}

impl Mover {
    pub fn new(
        cfg: &MobilityConfig,
        start: Position,
        width: f64,
        height: f64,
        mut rng: ChaCha8Rng,
    ) -> Self {
        let motion = match cfg.model {
            MobilityModel::Stationary => Motion::Still,
            MobilityModel::RandomWalk => Motion::Walk {
                heading: rng.random_range(0.0..std::f64::consts::TAU),
                speed: draw_speed(&mut rng, cfg),
                until_turn: cfg.step_interval,
            },
            MobilityModel::RandomWaypoint => Motion::Waypoint {
                target: Position::new(rng.random_range(0.0..=width), rng.random_range(0.0..=height)),
                speed: draw_speed(&mut rng, cfg),
                pause_left: 0.0,
            },
        };
        Mover {
            pos: start,
            width,
            height,
            motion,
            rng,
        }
    }

    pub fn position(&self) -> Position {
        self.pos
    }

    /// Current waypoint target, if any (exposed for tests and examples).
    pub fn waypoint(&self) -> Option<Position> {
        match self.motion {
            Motion::Waypoint { target, .. } => Some(target),
            _ => None,
        }
    }

    pub fn set_waypoint(&mut self, target: Position, speed: f64) {
        self.motion = Motion::Waypoint {
            target,
            speed,
            pause_left: 0.0,
        };
    }

    /// Advances the node by `dt` seconds and returns its new position.
    pub fn step(&mut self, cfg: &MobilityConfig, dt: f64) -> Position {
        debug_assert!(dt > 0.0);
        let (w, h) = (self.width, self.height);
        let rng = &mut self.rng;
        match &mut self.motion {
            Motion::Still => {}
            Motion::Walk {
                heading,
                speed,
                until_turn,
            } => {
                let mut x = self.pos.x + heading.cos() * *speed * dt;
                let mut y = self.pos.y + heading.sin() * *speed * dt;
                let (mut hx, mut hy) = (heading.cos(), heading.sin());
                reflect(&mut x, &mut hx, w);
                reflect(&mut y, &mut hy, h);
                *heading = hy.atan2(hx);
                self.pos = Position::new(x.clamp(0.0, w), y.clamp(0.0, h));
                *until_turn -= dt;
                if *until_turn <= 0.0 {
                    *heading = rng.random_range(0.0..std::f64::consts::TAU);
                    *speed = draw_speed(rng, cfg);
                    *until_turn = cfg.step_interval;
                }
            }
            Motion::Waypoint {
                target,
                speed,
                pause_left,
            } => {
                if *pause_left > 0.0 {
                    *pause_left -= dt;
                    if *pause_left <= 0.0 {
                        *pause_left = 0.0;
                        *target = Position::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h));
                        *speed = draw_speed(rng, cfg);
                    }
                } else {
                    let dist = self.pos.distance(target);
                    let travel = *speed * dt;
                    if travel >= dist {
                        self.pos = *target;
                        if cfg.pause_time > 0.0 {
                            *pause_left = cfg.pause_time;
                        } else {
                            *target =
                                Position::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h));
                            *speed = draw_speed(rng, cfg);
                        }
                    } else if dist > 0.0 {
                        let f = travel / dist;
                        self.pos = Position::new(
                            (self.pos.x + (target.x - self.pos.x) * f).clamp(0.0, w),
                            (self.pos.y + (target.y - self.pos.y) * f).clamp(0.0, h),
                        );
                    }
                }
            }
        }
        self.pos
    }
}

fn draw_speed(rng: &mut ChaCha8Rng, cfg: &MobilityConfig) -> f64 {
    if cfg.speed_max > cfg.speed_min {
        rng.random_range(cfg.speed_min..=cfg.speed_max)
    } else {
        cfg.speed_min
    }
}

/// Mirrors a coordinate that overshot `[0, extent]` and flips its heading component.
fn reflect(c: &mut f64, dir: &mut f64, extent: f64) {
    if extent <= 0.0 {
        *c = 0.0;
        return;
    }
    // A single step never exceeds the area in practice, but loop to be exact.
    loop {
        if *c < 0.0 {
            *c = -*c;
            *dir = dir.abs();
        } else if *c > extent {
            *c = 2.0 * extent - *c;
            *dir = -dir.abs();
        } else {
            break;
        }
    }
}

/// `log10(power_new / power_old)`; large negative values mean the peers are separating fast.
pub fn relative_mobility(power_new: f64, power_old: f64) -> f64 {
    assert!(
        power_new > 0.0 && power_old > 0.0,
        "received powers must be positive (got {} / {})",
        power_new,
        power_old
    );
    (power_new / power_old).log10()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fraction of completed up-interval durations that lasted at least `horizon`.
pub fn availability_from_durations(
    durations: &[f64],
    horizon: f64,
    min_samples: usize,
    prior: f64,
) -> f64 {
    if horizon <= 0.0 {
        return 1.0;
    }
    if durations.len() < min_samples.max(1) {
        return prior;
    }
    let lasting = durations.iter().filter(|&&d| d >= horizon).count();
    lasting as f64 / durations.len() as f64
}

pub fn stability_from(a_hat: f64, metric_recent: f64) -> f64 {
    (a_hat * sigmoid(metric_recent)).clamp(0.0, 1.0)
}

/// Link up/down history and received-power samples toward one peer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkHistory {
    pub peer: NodeId,
    intervals: Vec<(SimTime, Option<SimTime>)>,
    samples: VecDeque<(SimTime, f64)>,
    capacity: usize,
}

impl LinkHistory {
    pub fn new(peer: NodeId, capacity: usize) -> Self {
        LinkHistory {
            peer,
            intervals: Vec::new(),
            samples: VecDeque::with_capacity(capacity),
            capacity: capacity.max(2),
        }
    }

    pub fn is_up(&self) -> bool {
        matches!(self.intervals.last(), Some((_, None)))
    }

    pub fn link_up(&mut self, at: SimTime) {
        if !self.is_up() {
            if let Some((_, Some(end))) = self.intervals.last() {
                debug_assert!(*end <= at);
            }
            self.intervals.push((at, None));
        }
    }

    /// Closes the open interval and returns its duration in seconds.
    pub fn link_down(&mut self, at: SimTime) -> Option<f64> {
        match self.intervals.last_mut() {
            Some((start, end @ None)) => {
                *end = Some(at);
                Some((at - *start).as_secs())
            }
            _ => None,
        }
    }

    pub fn intervals(&self) -> &[(SimTime, Option<SimTime>)] {
        &self.intervals
    }

    pub fn completed_durations(&self) -> impl Iterator<Item = f64> + '_ {
        self.intervals
            .iter()
            .filter_map(|(s, e)| e.map(|e| (e - *s).as_secs()))
    }

    pub fn push_sample(&mut self, at: SimTime, power: f64) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((at, power));
    }

    pub fn samples(&self) -> impl Iterator<Item = &(SimTime, f64)> {
        self.samples.iter()
    }

    pub fn has_samples(&self) -> bool {
        !self.samples.is_empty()
    }

    /// Metric between the two most recent samples; zero with fewer than two.
    pub fn latest_metric(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        relative_mobility(self.samples[n - 1].1, self.samples[n - 2].1)
    }
}

/// Empirical `(a, t)` estimate pooled over several peers' histories.
///
/// Completed up-intervals count as samples; an interval still open at `now`
/// that has already lasted at least `horizon` counts as a surviving sample
/// (a right-censored observation that can no longer fall below the horizon).
pub fn link_availability<'a, I>(
    histories: I,
    horizon: f64,
    now: SimTime,
    min_samples: usize,
    prior: f64,
) -> f64
where
    I: IntoIterator<Item = &'a LinkHistory>,
{
    let mut durations: Vec<f64> = Vec::new();
    for h in histories {
        for (s, e) in &h.intervals {
            match e {
                Some(e) => durations.push((*e - *s).as_secs()),
                None => {
                    let open = now.saturating_sub(*s).as_secs();
                    if horizon > 0.0 && open >= horizon {
                        durations.push(open);
                    }
                }
            }
        }
    }
    availability_from_durations(&durations, horizon, min_samples, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn stationary_never_moves() {
        let cfg = MobilityConfig::default();
        let mut m = Mover::new(
            &cfg,
            Position::new(3.0, 4.0),
            10.0,
            10.0,
            ChaCha8Rng::seed_from_u64(1),
        );
        for _ in 0..10 {
            assert_eq!(m.step(&cfg, 7.5), Position::new(3.0, 4.0));
        }
    }

    #[test]
    fn waypoint_arrives_exactly() {
        let cfg = MobilityConfig {
            model: MobilityModel::RandomWaypoint,
            pause_time: 10.0,
            ..Default::default()
        };
        let mut m = Mover::new(
            &cfg,
            Position::new(0.0, 0.0),
            100.0,
            100.0,
            ChaCha8Rng::seed_from_u64(2),
        );
        m.set_waypoint(Position::new(30.0, 40.0), 5.0);
        // distance 50 = speed 5 * dt 10
        assert_eq!(m.step(&cfg, 10.0), Position::new(30.0, 40.0));
        // paused now
        assert_eq!(m.step(&cfg, 1.0), Position::new(30.0, 40.0));
    }

    #[test]
    fn walk_reflects_and_stays_in_bounds() {
        let cfg = MobilityConfig {
            model: MobilityModel::RandomWalk,
            speed_min: 1.0,
            speed_max: 20.0,
            step_interval: 3.0,
            ..Default::default()
        };
        let mut m = Mover::new(
            &cfg,
            Position::new(0.5, 99.5),
            100.0,
            100.0,
            ChaCha8Rng::seed_from_u64(3),
        );
        for _ in 0..10_000 {
            let p = m.step(&cfg, 1.0);
            assert!((0.0..=100.0).contains(&p.x) && (0.0..=100.0).contains(&p.y));
        }
    }

    #[test]
    fn reflection_flips_outward_heading() {
        let (mut x, mut hx) = (-2.0, -1.0);
        reflect(&mut x, &mut hx, 10.0);
        assert_eq!((x, hx), (2.0, 1.0));
        let (mut x, mut hx) = (12.0, 0.5);
        reflect(&mut x, &mut hx, 10.0);
        assert_eq!((x, hx), (8.0, -0.5));
    }

    #[test]
    fn relative_mobility_values() {
        assert_eq!(relative_mobility(2.0, 2.0), 0.0);
        assert!((relative_mobility(0.1, 1.0) + 1.0).abs() < 1e-12);
        // n = 2 and d -> 2d quarters the power
        assert!((relative_mobility(0.25, 1.0) - 0.25f64.log10()).abs() < 1e-12);
        assert!((relative_mobility(0.25, 1.0) + 0.60206).abs() < 1e-5);
    }

    #[test]
    #[should_panic]
    fn nonpositive_power_is_a_bug() {
        relative_mobility(0.0, 1.0);
    }

    #[test]
    fn availability_counting() {
        assert_eq!(availability_from_durations(&[1.0], 0.0, 5, 0.5), 1.0);
        assert_eq!(
            availability_from_durations(&[2.0, 4.0, 6.0, 8.0], 5.0, 1, 0.5),
            0.5
        );
        assert_eq!(availability_from_durations(&[2.0, 4.0], 5.0, 5, 0.3), 0.3);
    }

    #[test]
    fn stationary_links_converge_to_full_availability() {
        let hs: Vec<LinkHistory> = (0..6)
            .map(|i| {
                let mut h = LinkHistory::new(NodeId(i), 4);
                h.link_up(SimTime::ZERO);
                h
            })
            .collect();
        assert_eq!(link_availability(&hs, 4.0, SimTime::from_secs(1.0), 5, 0.5), 0.5);
        assert_eq!(link_availability(&hs, 4.0, SimTime::from_secs(10.0), 5, 0.5), 1.0);
        assert_eq!(link_availability(&hs, 0.0, SimTime::from_secs(1.0), 5, 0.5), 1.0);
    }

    #[test]
    fn stability_examples() {
        assert_eq!(stability_from(1.0, 0.0), 0.5);
        assert_eq!(stability_from(0.0, 3.0), 0.0);
        assert!(stability_from(1.0, -0.6) < stability_from(1.0, 0.0));
    }

    #[test]
    fn history_intervals() {
        let mut h = LinkHistory::new(NodeId(1), 4);
        h.link_up(SimTime::from_secs(1.0));
        assert!(h.is_up());
        assert_eq!(h.link_down(SimTime::from_secs(3.5)), Some(2.5));
        h.link_up(SimTime::from_secs(4.0));
        assert_eq!(h.completed_durations().collect::<Vec<_>>(), vec![2.5]);
        for i in 0..6 {
            h.push_sample(SimTime::from_secs(i as f64), 1.0 / (i + 1) as f64);
        }
        assert_eq!(h.samples().count(), 4);
        assert!(h.latest_metric() < 0.0);
    }
}
