//! Mesh forwarding state, path ranking and popularity tracking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::SimError;
use crate::packet::MemberKey;
use crate::rendezvous::GroupAddress;
use crate::time::SimTime;
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McastConfig {
    /// Defaults to `R + 2`.
    pub adv_ttl: Option<u32>,
    pub adv_period_s: f64,
    pub max_paths: usize,
    pub pop_query_th: f64,
    pub pop_th: f64,
    /// Soft expiry of idle forwarding state; defaults to `3 * adv_period_s`.
    pub member_expiry_s: Option<f64>,
    /// Timeout of the zone, contact and local-broadcast stages.
    pub stage_timeout_s: f64,
    /// Timeout of the rendezvous-region fallback.
    pub rr_timeout_s: f64,
    /// First retry delay of a pending join; doubles up to `join_retry_max_s`.
    pub join_retry_s: f64,
    pub join_retry_max_s: f64,
    /// SDS-supplied routes below this stability are not used.
    pub stability_floor: f64,
    pub pop_half_life_s: f64,
    pub pop_query_cooldown_s: f64,
    /// Receivers count toward delivery only this long after their join.
    pub join_grace_s: f64,
    /// A parent whose link metric falls below this is treated as separating.
    pub handoff_metric_th: f64,
    pub popularity_enabled: bool,
    /// Bordercast rounds used to find a route to a sender known only by location.
    pub route_query_rounds: u32,
}

impl Default for McastConfig {
    fn default() -> Self {
        McastConfig {
            adv_ttl: None,
            adv_period_s: 5.0,
            max_paths: 3,
            pop_query_th: 3.0,
            pop_th: 2.0,
            member_expiry_s: None,
            stage_timeout_s: 0.25,
            rr_timeout_s: 2.0,
            join_retry_s: 5.0,
            join_retry_max_s: 40.0,
            stability_floor: 0.05,
            pop_half_life_s: 30.0,
            pop_query_cooldown_s: 10.0,
            join_grace_s: 2.0,
            handoff_metric_th: -0.05,
            popularity_enabled: true,
            route_query_rounds: 3,
        }
    }
}

impl McastConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("mcast.adv_period_s", self.adv_period_s),
            ("mcast.stage_timeout_s", self.stage_timeout_s),
            ("mcast.rr_timeout_s", self.rr_timeout_s),
            ("mcast.join_retry_s", self.join_retry_s),
            ("mcast.join_retry_max_s", self.join_retry_max_s),
            ("mcast.pop_half_life_s", self.pop_half_life_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SimError::Config(format!("{name} must be > 0")));
            }
        }
        if self.max_paths == 0 {
            return Err(SimError::Config("mcast.max_paths must be >= 1".into()));
        }
        if matches!(self.adv_ttl, Some(0)) {
            return Err(SimError::Config("mcast.adv_ttl must be >= 1".into()));
        }
        if matches!(self.member_expiry_s, Some(e) if !(e > 0.0)) {
            return Err(SimError::Config("mcast.member_expiry_s must be > 0".into()));
        }
        if !(self.pop_th >= 0.0) || !(self.pop_query_th >= 0.0) || !(self.join_grace_s >= 0.0) {
            return Err(SimError::Config("mcast thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ActivationError {
    #[error("no branch toward {0}")]
    NoBranch(NodeId),
    #[error("branch toward {0} still has members below")]
    MemberBelow(NodeId),
}

/// One downstream branch. `members` holds the receivers whose active path
/// runs through it, so `member_below` is simply non-emptiness.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Branch {
    pub active: bool,
    pub members: BTreeMap<NodeId, u32>,
    pub refreshed: SimTime,
}

impl Branch {
    pub fn member_below(&self) -> bool {
        !self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamPath {
    /// receiver..attach point.
    pub route: Vec<NodeId>,
    pub stability: f64,
    pub active: bool,
    /// Join sequence the path was (or will be) activated with.
    pub seq: u32,
}

impl UpstreamPath {
    pub fn next_hop(&self) -> Option<NodeId> {
        self.route.get(1).copied()
    }
}

/// Per-node, per-group forwarding state.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshEntry {
    pub group: GroupAddress,
    pub sender: bool,
    pub receiver: bool,
    pub downstream: BTreeMap<NodeId, Branch>,
    /// Next hop toward the sender for each active membership passing here.
    pub parent_of: BTreeMap<MemberKey, NodeId>,
    /// Receiver only: candidate paths, exactly one active when non-empty.
    pub upstream_paths: Vec<UpstreamPath>,
    /// Hops to the sender along the mesh, `u32::MAX` while unknown.
    pub depth: u32,
    pub last_data: SimTime,
    seen: BTreeSet<(NodeId, u32)>,
}

/// What changed when a membership was added or removed from a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchChange {
    None,
    Activated,
    Deactivated,
}

impl MeshEntry {
    pub fn new(group: GroupAddress) -> Self {
        MeshEntry {
            group,
            sender: false,
            receiver: false,
            downstream: BTreeMap::new(),
            parent_of: BTreeMap::new(),
            upstream_paths: Vec::new(),
            depth: u32::MAX,
            last_data: SimTime::ZERO,
            seen: BTreeSet::new(),
        }
    }

    pub fn has_active_downstream(&self) -> bool {
        self.downstream.values().any(|b| b.active)
    }

    pub fn active_path(&self) -> Option<&UpstreamPath> {
        self.upstream_paths.iter().find(|p| p.active)
    }

    /// The receiver holds at least one path (it is joined).
    pub fn joined(&self) -> bool {
        self.receiver && !self.upstream_paths.is_empty()
    }

    /// Node carries or originates data for the group.
    pub fn on_mesh(&self) -> bool {
        self.sender || self.has_active_downstream() || !self.parent_of.is_empty() || self.active_path().is_some()
    }

    pub fn is_idle(&self) -> bool {
        !self.sender && !self.receiver && self.downstream.is_empty() && self.parent_of.is_empty()
    }

    /// Adds an active membership through `child`, activating the branch.
    pub fn add_member(&mut self, child: NodeId, key: MemberKey, now: SimTime) -> BranchChange {
        let b = self.downstream.entry(child).or_default();
        b.members.insert(key.0, key.1);
        b.refreshed = now;
        if b.active {
            BranchChange::None
        } else {
            b.active = true;
            BranchChange::Activated
        }
    }

    /// Records a standby branch (no membership, inactive unless already active).
    pub fn add_standby(&mut self, child: NodeId, now: SimTime) {
        let b = self.downstream.entry(child).or_default();
        b.refreshed = now;
    }

    /// Drops `key` from the branch toward `child` if the sequence matches;
    /// an emptied branch deactivates.
    pub fn remove_member(&mut self, child: NodeId, key: MemberKey) -> BranchChange {
        let Some(b) = self.downstream.get_mut(&child) else {
            return BranchChange::None;
        };
        if b.members.get(&key.0) == Some(&key.1) {
            b.members.remove(&key.0);
        }
        if b.active && b.members.is_empty() {
            b.active = false;
            BranchChange::Deactivated
        } else {
            BranchChange::None
        }
    }

    /// Branch containing `key`, if any.
    pub fn branch_of(&self, key: MemberKey) -> Option<NodeId> {
        self.downstream
            .iter()
            .find(|(_, b)| b.members.get(&key.0) == Some(&key.1))
            .map(|(c, _)| *c)
    }

    /// Explicit activation control. Deactivation is refused while a member is below.
    pub fn set_branch_activation(&mut self, child: NodeId, active: bool) -> Result<(), ActivationError> {
        let b = self
            .downstream
            .get_mut(&child)
            .ok_or(ActivationError::NoBranch(child))?;
        if !active && b.member_below() {
            return Err(ActivationError::MemberBelow(child));
        }
        b.active = active;
        Ok(())
    }

    /// Neighbors a data packet is copied to: active branches, plus the
    /// parents when the packet did not come down from a parent, minus the
    /// link it arrived on.
    pub fn forward_targets(&self, arrival: Option<NodeId>) -> Vec<NodeId> {
        let mut out: BTreeSet<NodeId> = self
            .downstream
            .iter()
            .filter(|(_, b)| b.active)
            .map(|(c, _)| *c)
            .collect();
        let from_parent = arrival.is_some_and(|a| self.parent_of.values().any(|&p| p == a));
        if !from_parent {
            out.extend(self.parent_of.values().copied());
        }
        if let Some(a) = arrival {
            out.remove(&a);
        }
        out.into_iter().collect()
    }

    pub fn is_parent(&self, n: NodeId) -> bool {
        self.parent_of.values().any(|&p| p == n)
    }

    /// On the mesh for some member other than `r` (or as a sender).
    pub fn serves_other_than(&self, r: NodeId) -> bool {
        self.sender || self.parent_of.keys().any(|k| k.0 != r)
    }

    /// Records a data packet; `false` if it was already seen.
    pub fn first_sight(&mut self, src: NodeId, seq: u32) -> bool {
        self.seen.insert((src, seq))
    }

    /// Key and next hop whose parent chain a grafting join should follow.
    pub fn primary_upstream(&self, me: NodeId) -> Option<(MemberKey, NodeId)> {
        if let Some(p) = self.active_path() {
            let key = (me, p.seq);
            if let Some(&n) = self.parent_of.get(&key) {
                return Some((key, n));
            }
        }
        self.parent_of.iter().next().map(|(k, n)| (*k, *n))
    }

    /// Keys whose parent is `n`.
    pub fn keys_via_parent(&self, n: NodeId) -> Vec<MemberKey> {
        self.parent_of
            .iter()
            .filter(|(_, p)| **p == n)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn black_holes(&self) -> Vec<NodeId> {
        self.downstream
            .iter()
            .filter(|(_, b)| b.member_below() && !b.active)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn active_path_count(&self) -> usize {
        self.upstream_paths.iter().filter(|p| p.active).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CandidateSource {
    Adv,
    Graft,
    ServerRoute,
    Discovered,
}

impl CandidateSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateSource::Adv => "adv",
            CandidateSource::Graft => "graft",
            CandidateSource::ServerRoute => "server_route",
            CandidateSource::Discovered => "discovered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub route: Vec<NodeId>,
    pub stability: f64,
    pub source: CandidateSource,
}

/// Bottleneck stability of a path from its per-link values.
pub fn path_stability(links: &[f64]) -> f64 {
    links.iter().copied().fold(1.0, f64::min).clamp(0.0, 1.0)
}

/// Highest stability first, then shortest; duplicates and loops removed.
pub fn rank_candidates(mut cands: Vec<Candidate>, max_paths: usize) -> Vec<Candidate> {
    cands.retain(|c| {
        c.route.len() >= 2 && {
            let mut s = c.route.clone();
            s.sort_unstable();
            s.windows(2).all(|w| w[0] != w[1])
        }
    });
    cands.sort_by(|a, b| {
        b.stability
            .total_cmp(&a.stability)
            .then(a.route.len().cmp(&b.route.len()))
            .then(a.source.cmp(&b.source))
            .then(a.route.cmp(&b.route))
    });
    // Keep the best-ranked copy of each route.
    let mut seen = std::collections::BTreeSet::new();
    cands.retain(|c| seen.insert(c.route.clone()));
    cands.truncate(max_paths);
    cands
}

pub fn pop_estimate(grp_est: u32, sds_est: u32) -> f64 {
    grp_est as f64 / sds_est.max(1) as f64
}

/// Observation counter with exponential decay plus the last group-query result.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityState {
    half_life: f64,
    count: f64,
    at: SimTime,
    pub grp_est: u32,
    pub sds_est: u32,
    pub pop_est: Option<f64>,
    pub last_query: Option<SimTime>,
}

impl PopularityState {
    pub fn new(half_life_s: f64) -> Self {
        PopularityState {
            half_life: half_life_s,
            count: 0.0,
            at: SimTime::ZERO,
            grp_est: 0,
            sds_est: 1,
            pop_est: None,
            last_query: None,
        }
    }

    pub fn observe(&mut self, now: SimTime) {
        self.count = self.count_at(now) + 1.0;
        self.at = now;
    }

    pub fn count_at(&self, now: SimTime) -> f64 {
        let dt = now.saturating_sub(self.at).as_secs();
        self.count * 0.5f64.powf(dt / self.half_life)
    }

    pub fn complete_query(&mut self, grp_est: u32, sds_est: u32) -> f64 {
        self.grp_est = grp_est;
        self.sds_est = sds_est.max(1);
        let p = pop_estimate(grp_est, sds_est);
        self.pop_est = Some(p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn entry() -> MeshEntry {
        MeshEntry::new(GroupAddress::new(1, 1))
    }

    #[test]
    fn two_active_one_inactive_forward_twice() {
        let mut e = entry();
        e.add_member(n(1), (n(10), 0), SimTime::ZERO);
        e.add_member(n(2), (n(11), 0), SimTime::ZERO);
        e.add_standby(n(3), SimTime::ZERO);
        assert_eq!(e.forward_targets(None), vec![n(1), n(2)]);
        assert_eq!(e.forward_targets(Some(n(1))), vec![n(2)]);
    }

    #[test]
    fn deduplicates_data() {
        let mut e = entry();
        assert!(e.first_sight(n(0), 7));
        assert!(!e.first_sight(n(0), 7));
    }

    #[test]
    fn activation_rule() {
        let mut e = entry();
        e.add_member(n(4), (n(9), 2), SimTime::ZERO);
        assert_eq!(e.set_branch_activation(n(4), false), Err(ActivationError::MemberBelow(n(4))));
        // A stale sequence does not remove the member.
        assert_eq!(e.remove_member(n(4), (n(9), 1)), BranchChange::None);
        assert_eq!(e.remove_member(n(4), (n(9), 2)), BranchChange::Deactivated);
        assert!(e.black_holes().is_empty());
        assert!(e.set_branch_activation(n(4), true).is_ok());
        assert!(e.set_branch_activation(n(4), false).is_ok());
        assert_eq!(e.set_branch_activation(n(5), true), Err(ActivationError::NoBranch(n(5))));
    }

    #[test]
    fn ranking() {
        let c = |route: &[u32], s| Candidate {
            route: route.iter().map(|&i| n(i)).collect(),
            stability: s,
            source: CandidateSource::Adv,
        };
        let ranked = rank_candidates(vec![c(&[0, 1], 0.4), c(&[0, 2], 0.9), c(&[0, 3], 0.7)], 2);
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].stability, 0.9);
        assert_eq!(ranked[1].stability, 0.7);
        let ties = rank_candidates(vec![c(&[0, 4, 5, 1], 0.5), c(&[0, 1], 0.5), c(&[0, 2, 0], 1.0)], 3);
        assert_eq!(ties.len(), 2, "looping route dropped");
        assert_eq!(ties[0].route.len(), 2);
    }

    #[test]
    fn popularity_ratio() {
        let mut p = PopularityState::new(30.0);
        assert_eq!(p.complete_query(6, 2), 3.0);
        assert!(p.complete_query(6, 6) < 2.0);
        assert_eq!(pop_estimate(3, 0), 3.0);
        p.observe(SimTime::ZERO);
        p.observe(SimTime::ZERO);
        assert_eq!(p.count_at(SimTime::ZERO), 2.0);
        assert!((p.count_at(SimTime::from_secs(30.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bottleneck_stability() {
        assert_eq!(path_stability(&[0.9, 0.3, 0.8]), 0.3);
        assert_eq!(path_stability(&[]), 1.0);
    }
}
