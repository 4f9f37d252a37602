//! Contacts: former zone members kept as long-range shortcuts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geo::Position;
use crate::time::SimTime;
use crate::zone::ZoneTable;
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    pub enabled: bool,
    pub k: f64,
    #[serde(rename = "A_half")]
    pub a_half: f64,
    /// Energy normalization; `None` uses the median product at start.
    #[serde(rename = "E_half")]
    pub e_half: Option<f64>,
    /// Defaults to twice the hello interval.
    pub maintenance_period_s: Option<f64>,
    pub max_contacts: usize,
    /// Half-life of the discovery-request rate average.
    pub activity_half_life_s: f64,
    /// Additive probability bonus for SDS-capable candidates (off by default).
    pub capability_bonus: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig {
            enabled: true,
            k: 4.0,
            a_half: 1.0,
            e_half: None,
            maintenance_period_s: None,
            max_contacts: 8,
            activity_half_life_s: 30.0,
            capability_bonus: 0.0,
        }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.k >= 0.0) || !(self.a_half > 0.0) {
            return Err(SimError::Config("contacts.k must be >= 0 and contacts.A_half > 0".into()));
        }
        if matches!(self.e_half, Some(e) if !(e > 0.0)) {
            return Err(SimError::Config("contacts.E_half must be > 0".into()));
        }
        if matches!(self.maintenance_period_s, Some(p) if !(p > 0.0)) {
            return Err(SimError::Config("contacts.maintenance_period_s must be > 0".into()));
        }
        if !(self.activity_half_life_s > 0.0) || !(0.0..=1.0).contains(&self.capability_bonus) {
            return Err(SimError::Config(
                "contacts.activity_half_life_s must be > 0 and capability_bonus in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub gps: bool,
    pub sds_for: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactEntry {
    pub contact: NodeId,
    /// Full route owner..contact (owner first).
    pub route: Vec<NodeId>,
    pub established_at: SimTime,
    pub last_refresh: SimTime,
    pub s_est: f64,
    pub e_est_contact: f64,
    pub capabilities: Capabilities,
    /// Last reported position of the contact.
    pub position: Position,
}

impl ContactEntry {
    pub fn hops(&self) -> usize {
        self.route.len().saturating_sub(1)
    }
}

/// Longest allowed contact route, in hops.
pub fn contact_bound(radius: u32) -> usize {
    2 * radius as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionInputs {
    pub e_est: f64,
    pub s_est: f64,
    pub a_est: f64,
    pub z_est: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub k: f64,
    pub e_half: f64,
    pub a_half: f64,
}

/// Product of the two remaining-lifetime ratios `E_left / drain`.
pub fn energy_estimate(node: (f64, f64), contact: (f64, f64)) -> Result<f64, SimError> {
    if !(node.1 > 0.0) || !(contact.1 > 0.0) {
        return Err(SimError::Config("energy drain must be > 0".into()));
    }
    Ok((node.0.max(0.0) / node.1) * (contact.0.max(0.0) / contact.1))
}

/// `p = min(1, k * E^ * S * A^ / Z)` with saturating normalisations of E and A.
pub fn selection_probability(i: &SelectionInputs, params: &SelectionParams) -> f64 {
    let z = i.z_est.max(1) as f64;
    let e = i.e_est.max(0.0);
    let a = i.a_est.max(0.0);
    let e_hat = if e == 0.0 { 0.0 } else { e / (e + params.e_half) };
    let a_hat = if a == 0.0 { 0.0 } else { a / (a + params.a_half) };
    probability_from_normalized(params.k, e_hat, i.s_est, a_hat, z)
}

/// The clamp applied to already-normalised factors.
pub fn probability_from_normalized(k: f64, e_hat: f64, s_est: f64, a_hat: f64, z_est: f64) -> f64 {
    (k * e_hat * s_est.clamp(0.0, 1.0) * a_hat / z_est.max(1.0)).clamp(0.0, 1.0)
}

/// Median of the per-node squared lifetimes, the default `E_half`.
pub fn median_energy_product(lifetimes: &[f64]) -> f64 {
    let mut sq: Vec<f64> = lifetimes.iter().map(|l| l * l).collect();
    if sq.is_empty() {
        return 1.0;
    }
    sq.sort_by(f64::total_cmp);
    let m = sq.len() / 2;
    let med = if sq.len() % 2 == 1 {
        sq[m]
    } else {
        0.5 * (sq[m - 1] + sq[m])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Former members that left the zone but are still reachable within
/// `2R+1` hops. `reach(c)` reports the best hop count to `c` through the
/// new table's border nodes, if any such route exists.
pub fn detect_drifting<F>(old: &ZoneTable, new: &ZoneTable, mut reach: F) -> BTreeSet<NodeId>
where
    F: FnMut(NodeId) -> Option<usize>,
{
    let bound = contact_bound(new.radius);
    old.members
        .keys()
        .filter(|m| !new.members.contains_key(m))
        .filter(|&&m| reach(m).is_some_and(|h| h <= bound))
        .copied()
        .collect()
}

/// Members that left `old` without any reachability test.
pub fn departed(old: &ZoneTable, new: &ZoneTable) -> Vec<NodeId> {
    old.members
        .keys()
        .filter(|m| !new.members.contains_key(m))
        .copied()
        .collect()
}

/// Splices a repair at index `at` of `route`: `detour` starts at `route[at]`
/// and ends at some later node of `route`. Returns the repaired route.
pub fn splice_route(route: &[NodeId], at: usize, detour: &[NodeId]) -> Option<Vec<NodeId>> {
    let first = *detour.first()?;
    let last = *detour.last()?;
    if route.get(at) != Some(&first) {
        return None;
    }
    let rejoin = route.iter().skip(at + 1).position(|&n| n == last)? + at + 1;
    let mut out: Vec<NodeId> = route[..at].to_vec();
    out.extend_from_slice(detour);
    out.extend_from_slice(&route[rejoin + 1..]);
    Some(crate::packet::simple_path(out))
}

/// Exponentially decaying event rate (events per second).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimator {
    half_life: f64,
    value: f64,
    at: SimTime,
}

impl RateEstimator {
    pub fn new(half_life_s: f64) -> Self {
        RateEstimator {
            half_life: half_life_s,
            value: 0.0,
            at: SimTime::ZERO,
        }
    }

    fn decay_to(&mut self, now: SimTime) {
        let dt = now.saturating_sub(self.at).as_secs();
        if dt > 0.0 {
            self.value *= 0.5f64.powf(dt / self.half_life);
            self.at = now;
        }
    }

    pub fn observe(&mut self, now: SimTime) {
        self.decay_to(now);
        // Unit impulse scaled so a steady rate r settles at r.
        self.value += std::f64::consts::LN_2 / self.half_life;
    }

    pub fn rate(&self, now: SimTime) -> f64 {
        let dt = now.saturating_sub(self.at).as_secs();
        self.value * 0.5f64.powf(dt / self.half_life)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zone::ZoneMember;

    fn table(owner: u32, members: &[(u32, u32)]) -> ZoneTable {
        let mut t = ZoneTable::empty(NodeId(owner), 2);
        for &(m, h) in members {
            t.members.insert(
                NodeId(m),
                ZoneMember {
                    hops: h,
                    next_hop: NodeId(m),
                },
            );
        }
        t
    }

    const P: SelectionParams = SelectionParams {
        k: 4.0,
        e_half: 1.0,
        a_half: 1.0,
    };

    #[test]
    fn energy_examples() {
        assert_eq!(energy_estimate((100.0, 2.0), (80.0, 4.0)).unwrap(), 1000.0);
        assert_eq!(energy_estimate((0.0, 2.0), (80.0, 4.0)).unwrap(), 0.0);
        let base = energy_estimate((100.0, 2.0), (80.0, 4.0)).unwrap();
        let doubled = energy_estimate((100.0, 4.0), (80.0, 8.0)).unwrap();
        assert!((base / doubled - 4.0).abs() < 1e-12);
        assert!(energy_estimate((1.0, 0.0), (1.0, 1.0)).is_err());
    }

    #[test]
    fn probability_examples() {
        let base = SelectionInputs {
            e_est: 1.0,
            s_est: 0.5,
            a_est: 1.0,
            z_est: 1,
        };
        assert_eq!(selection_probability(&SelectionInputs { s_est: 0.0, ..base }, &P), 0.0);
        let p1 = selection_probability(&SelectionInputs { s_est: 0.2, ..base }, &P);
        let p2 = selection_probability(&SelectionInputs { s_est: 0.2, z_est: 2, ..base }, &P);
        assert!(p1 < 1.0);
        assert!((p1 / p2 - 2.0).abs() < 1e-12);
        assert_eq!(probability_from_normalized(4.0, 1.0, 1.0, 1.0, 4.0), 1.0);
        let sat = SelectionParams {
            k: 4.0,
            e_half: 1e-300,
            a_half: 1e-300,
        };
        let full = SelectionInputs {
            e_est: 1.0,
            s_est: 1.0,
            a_est: 1.0,
            z_est: 4,
        };
        assert_eq!(selection_probability(&full, &sat), 1.0);
    }

    #[test]
    fn no_change_no_candidates() {
        let t = table(0, &[(1, 1), (2, 2)]);
        assert!(detect_drifting(&t, &t, |_| Some(3)).is_empty());
    }

    #[test]
    fn drift_bound() {
        let old = table(0, &[(1, 1), (2, 2), (3, 2)]);
        let new = table(0, &[(1, 1)]);
        // 2 sits at R+1 = 3 hops, 3 has drifted to 2R+2 = 6.
        let got = detect_drifting(&old, &new, |c| match c.0 {
            2 => Some(3),
            3 => Some(6),
            _ => None,
        });
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![NodeId(2)]);
    }

    #[test]
    fn splice_single_hop_repair() {
        let r: Vec<NodeId> = [0, 1, 2, 3, 4].map(NodeId).to_vec();
        let fixed = splice_route(&r, 1, &[NodeId(1), NodeId(7), NodeId(3)]).unwrap();
        assert_eq!(fixed, [0, 1, 7, 3, 4].map(NodeId).to_vec());
        assert!(splice_route(&r, 1, &[NodeId(2), NodeId(3)]).is_none());
    }

    #[test]
    fn rate_estimator_settles() {
        let mut r = RateEstimator::new(30.0);
        for i in 0..3000 {
            r.observe(SimTime::from_secs(i as f64 * 0.1));
        }
        let v = r.rate(SimTime::from_secs(300.0));
        assert!((v - 10.0).abs() < 0.5, "{v}");
    }

    #[test]
    fn median_default() {
        assert_eq!(median_energy_product(&[1.0, 3.0, 2.0]), 4.0);
        assert_eq!(median_energy_product(&[]), 1.0);
    }
}
