//! Geographic multicast address allocation and rendezvous-region helpers.
//!
//! The multicast address space is split into prefixes, and each prefix is
//! bound to one cell of a uniform grid laid over the simulation area. Nodes
//! inside a cell collectively act as sender discovery servers (SDSs) for the
//! groups under that prefix. This module holds the pure parts: the mapping,
//! the SDS promotion rule, the soft-state SDS records, the session registry,
//! and the next-hop rules used by lollipop forwarding.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geo::{Position, Rect};
use crate::time::SimTime;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAddress {
    pub prefix: u32,
    pub suffix: u32,
}

impl GroupAddress {
    /// Well-known session-advertisement group.
    pub const SESSION_DIRECTORY: GroupAddress = GroupAddress {
        prefix: 0,
        suffix: 0,
    };

    pub const fn new(prefix: u32, suffix: u32) -> Self {
        GroupAddress { prefix, suffix }
    }
}

impl fmt::Display for GroupAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.prefix, self.suffix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RendezvousRegion {
    pub prefix: u32,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RrConfig {
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub target_sds: u32,
    /// Lollipop switch distance; defaults to `2 * range * R`.
    pub l_limit_m: Option<f64>,
    pub sender_ttl_s: f64,
    pub prefix_bits: u32,
    pub suffix_bits: u32,
    pub decision_period_s: f64,
    /// No promotion decisions before this time (zones need to settle first).
    pub warmup_s: f64,
    pub suppress_window_s: f64,
    pub advert_period_s: f64,
    /// Fraction of nodes configured as server-capable.
    pub eligible_fraction: f64,
    pub register_timeout_s: f64,
    pub register_retries: u32,
    /// Hop ceiling for geographic forwarding and geocast.
    pub max_hops: u32,
    /// How often a popularity-promoted local SDS re-syncs with the RR.
    pub local_sync_period_s: f64,
}

impl Default for RrConfig {
    fn default() -> Self {
        RrConfig {
            grid_cols: 8,
            grid_rows: 8,
            target_sds: 5,
            l_limit_m: None,
            sender_ttl_s: 60.0,
            prefix_bits: 6,
            suffix_bits: 10,
            decision_period_s: 5.0,
            warmup_s: 3.0,
            suppress_window_s: 5.0,
            advert_period_s: 5.0,
            eligible_fraction: 1.0,
            register_timeout_s: 2.0,
            register_retries: 4,
            max_hops: 64,
            local_sync_period_s: 20.0,
        }
    }
}

impl RrConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("rr.sender_ttl_s", self.sender_ttl_s),
            ("rr.decision_period_s", self.decision_period_s),
            ("rr.advert_period_s", self.advert_period_s),
            ("rr.register_timeout_s", self.register_timeout_s),
            ("rr.local_sync_period_s", self.local_sync_period_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SimError::Config(format!("{name} must be > 0")));
            }
        }
        if !(self.warmup_s >= 0.0) || !(self.suppress_window_s >= 0.0) {
            return Err(SimError::Config("rr.warmup_s and rr.suppress_window_s must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.eligible_fraction) {
            return Err(SimError::Config("rr.eligible_fraction must be in [0,1]".into()));
        }
        if matches!(self.l_limit_m, Some(l) if !(l > 0.0)) {
            return Err(SimError::Config("rr.l_limit_m must be > 0".into()));
        }
        if self.max_hops == 0 {
            return Err(SimError::Config("rr.max_hops must be >= 1".into()));
        }
        Ok(())
    }
}

/// The algorithmic mapping between positions, prefixes and regions.
#[derive(Debug, Clone, PartialEq)]
pub struct AddressGrid {
    width: f64,
    height: f64,
    cols: u32,
    rows: u32,
    suffix_bits: u32,
}

impl AddressGrid {
    pub fn new(
        width: f64,
        height: f64,
        cols: u32,
        rows: u32,
        prefix_bits: u32,
        suffix_bits: u32,
    ) -> Result<Self, SimError> {
        if cols == 0 || rows == 0 {
            return Err(SimError::Config("rr grid needs at least one cell".into()));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(SimError::Config("area must have positive size".into()));
        }
        if prefix_bits >= 32 || u64::from(cols) * u64::from(rows) > (1u64 << prefix_bits) {
            return Err(SimError::Config(format!(
                "{}x{} grid does not fit in {} prefix bits",
                cols, rows, prefix_bits
            )));
        }
        if suffix_bits == 0 || suffix_bits > 31 {
            return Err(SimError::Config("rr.suffix_bits must be in 1..=31".into()));
        }
        Ok(AddressGrid {
            width,
            height,
            cols,
            rows,
            suffix_bits,
        })
    }

    pub fn region_count(&self) -> u32 {
        self.cols * self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn max_suffix(&self) -> u32 {
        (1u32 << self.suffix_bits) - 1
    }

    pub fn area_rect(&self) -> Rect {
        Rect::new(0.0, self.width, 0.0, self.height)
    }

    // Edge coordinates are computed from the same expression on both sides of
    // every cell border, so adjacent rectangles share bit-identical edges.
    fn x_edge(&self, col: u32) -> f64 {
        if col == self.cols {
            self.width
        } else {
            self.width * f64::from(col) / f64::from(self.cols)
        }
    }

    fn y_edge(&self, row: u32) -> f64 {
        if row == self.rows {
            self.height
        } else {
            self.height * f64::from(row) / f64::from(self.rows)
        }
    }

    pub fn region(&self, prefix: u32) -> RendezvousRegion {
        assert!(
            prefix < self.region_count(),
            "prefix {} outside grid of {} cells",
            prefix,
            self.region_count()
        );
        let col = prefix % self.cols;
        let row = prefix / self.cols;
        RendezvousRegion {
            prefix,
            rect: Rect::new(
                self.x_edge(col),
                self.x_edge(col + 1),
                self.y_edge(row),
                self.y_edge(row + 1),
            ),
        }
    }

    pub fn rr_of_group(&self, addr: GroupAddress) -> RendezvousRegion {
        self.region(addr.prefix)
    }

    pub fn regions(&self) -> impl Iterator<Item = RendezvousRegion> + '_ {
        (0..self.region_count()).map(move |p| self.region(p))
    }

    fn locate(coord: f64, cells: u32, edge: impl Fn(u32) -> f64, extent: f64) -> u32 {
        let mut c = ((coord / extent) * f64::from(cells)).floor();
        if c < 0.0 {
            c = 0.0;
        }
        let mut c = (c as u32).min(cells - 1);
        while c > 0 && coord < edge(c) {
            c -= 1;
        }
        while c + 1 < cells && coord >= edge(c + 1) {
            c += 1;
        }
        c
    }

    /// Maps a position to its prefix; the right/top area boundary belongs to the last cell.
    ///
    /// Panics if `pos` lies outside the area: positions handed to the mapping
    /// are always clamped by the mobility layer, so this is a caller bug.
    pub fn prefix_of_position(&self, pos: &Position) -> u32 {
        assert!(
            pos.x >= 0.0 && pos.x <= self.width && pos.y >= 0.0 && pos.y <= self.height,
            "position ({}, {}) outside area",
            pos.x,
            pos.y
        );
        let col = Self::locate(pos.x, self.cols, |c| self.x_edge(c), self.width);
        let row = Self::locate(pos.y, self.rows, |r| self.y_edge(r), self.height);
        col + self.cols * row
    }

    pub fn is_inside(&self, prefix: u32, pos: &Position) -> bool {
        self.prefix_of_position(pos) == prefix
    }
}

/// Probability that an eligible node promotes itself to SDS in one decision round.
pub fn promotion_probability(
    eligible: bool,
    target_sds: u32,
    observed_sds: u32,
    expected_population: f64,
) -> f64 {
    if !eligible || observed_sds >= target_sds {
        return 0.0;
    }
    let deficit = f64::from(target_sds - observed_sds);
    (deficit / expected_population.max(1.0)).clamp(0.0, 1.0)
}

/// Crude estimate of how many nodes share the caller's region.
pub fn expected_region_population(
    zone_nodes_in_region: usize,
    region_area: f64,
    zone_area: f64,
) -> f64 {
    let ratio = if zone_area > 0.0 {
        (region_area / zone_area).max(1.0)
    } else {
        1.0
    };
    ((zone_nodes_in_region + 1) as f64 * ratio).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenderEntry {
    pub approx_position: Position,
    pub advert_time: SimTime,
    /// Route from the record holder to the sender, when one was learned.
    pub route: Option<Vec<NodeId>>,
    /// Bottleneck stability of `route` when it was learned.
    pub stability: f64,
}

/// Soft-state sender information for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsRecord {
    pub group: GroupAddress,
    pub senders: BTreeMap<NodeId, SenderEntry>,
    pub queries_answered: u32,
}

impl SdsRecord {
    pub fn new(group: GroupAddress) -> Self {
        SdsRecord {
            group,
            senders: BTreeMap::new(),
            queries_answered: 0,
        }
    }

    /// Newer adverts win; an older advert can still contribute a missing route.
    pub fn upsert(&mut self, sender: NodeId, entry: SenderEntry) {
        match self.senders.get_mut(&sender) {
            Some(cur) if cur.advert_time > entry.advert_time => {
                if cur.route.is_none() {
                    cur.route = entry.route;
                    cur.stability = entry.stability;
                }
            }
            Some(cur) => {
                let keep_route = entry.route.is_none();
                let old_route = cur.route.take();
                let old_stability = cur.stability;
                *cur = entry;
                if keep_route {
                    cur.route = old_route;
                    cur.stability = old_stability;
                }
            }
            None => {
                self.senders.insert(sender, entry);
            }
        }
    }

    pub fn merge(&mut self, other: &SdsRecord) {
        for (s, e) in &other.senders {
            let mut e = e.clone();
            // Routes are relative to the holder and meaningless elsewhere.
            e.route = None;
            self.upsert(*s, e);
        }
    }

    pub fn expire(&mut self, now: SimTime, ttl: SimTime) {
        self.senders
            .retain(|_, e| now.saturating_sub(e.advert_time) <= ttl);
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub addr: GroupAddress,
    pub initiator: NodeId,
    pub registered_at: SimTime,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Confirmed(GroupAddress),
    /// The requested address is taken; the registrar offers this one instead.
    Rejected { alternative: GroupAddress },
    Exhausted,
}

/// Address registry kept by the SDSs of one rendezvous region.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionRegistry {
    sessions: BTreeMap<GroupAddress, SessionInfo>,
}

impl SessionRegistry {
    pub fn get(&self, addr: &GroupAddress) -> Option<&SessionInfo> {
        self.sessions.get(addr)
    }

    pub fn insert(&mut self, info: SessionInfo) {
        self.sessions.insert(info.addr, info);
    }

    pub fn all(&self) -> impl Iterator<Item = &SessionInfo> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    fn lowest_unused(&self, prefix: u32, max_suffix: u32) -> Option<GroupAddress> {
        // Suffix 0 under prefix 0 is the session directory itself.
        let start = if prefix == 0 { 1 } else { 0 };
        (start..=max_suffix)
            .map(|s| GroupAddress::new(prefix, s))
            .find(|a| !self.sessions.contains_key(a))
    }

    /// Assigns an address for `info.initiator`; on success the session is recorded.
    pub fn assign(
        &mut self,
        prefix: u32,
        requested: Option<GroupAddress>,
        max_suffix: u32,
        mut info: SessionInfo,
    ) -> Assignment {
        if let Some(req) = requested {
            let same_owner = self
                .sessions
                .get(&req)
                .map(|s| s.initiator == info.initiator)
                .unwrap_or(false);
            let reserved = req == GroupAddress::SESSION_DIRECTORY;
            if !reserved && (same_owner || !self.sessions.contains_key(&req)) {
                info.addr = req;
                self.sessions.insert(req, info);
                return Assignment::Confirmed(req);
            }
            return match self.lowest_unused(req.prefix, max_suffix) {
                Some(alternative) => Assignment::Rejected { alternative },
                None => Assignment::Exhausted,
            };
        }
        if let Some(existing) = self
            .sessions
            .values()
            .find(|s| s.initiator == info.initiator && s.addr.prefix == prefix && s.name == info.name)
        {
            return Assignment::Confirmed(existing.addr);
        }
        match self.lowest_unused(prefix, max_suffix) {
            Some(addr) => {
                info.addr = addr;
                self.sessions.insert(addr, info);
                Assignment::Confirmed(addr)
            }
            None => Assignment::Exhausted,
        }
    }
}

/// Greedy geographic next hop: the neighbor closest to `target` that is
/// strictly closer than `here`. Ties go to the lower node id.
pub fn greedy_next_hop<I>(here: &Position, target: &Position, neighbors: I) -> Option<NodeId>
where
    I: IntoIterator<Item = (NodeId, Position)>,
{
    let own = here.distance_sq(target);
    let mut best: Option<(f64, NodeId)> = None;
    for (id, p) in neighbors {
        let d = p.distance_sq(target);
        if d >= own {
            continue;
        }
        match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < id) => {}
            _ => best = Some((d, id)),
        }
    }
    best.map(|(_, id)| id)
}

/// Lollipop contact choice: the candidate with minimal distance to `rect`
/// among those strictly closer than `here`.
pub fn closer_contact<I>(here: &Position, rect: &Rect, contacts: I) -> Option<NodeId>
where
    I: IntoIterator<Item = (NodeId, Position)>,
{
    let own = rect.distance_to(here);
    let mut best: Option<(f64, NodeId)> = None;
    for (id, p) in contacts {
        let d = rect.distance_to(&p);
        if d >= own {
            continue;
        }
        match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < id) => {}
            _ => best = Some((d, id)),
        }
    }
    best.map(|(_, id)| id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> AddressGrid {
        AddressGrid::new(1000.0, 1000.0, 4, 4, 8, 16).unwrap()
    }

    #[test]
    fn origin_maps_to_prefix_zero() {
        assert_eq!(grid4().prefix_of_position(&Position::new(0.0, 0.0)), 0);
    }

    #[test]
    fn floor_arithmetic() {
        assert_eq!(grid4().prefix_of_position(&Position::new(600.0, 300.0)), 6);
    }

    #[test]
    fn far_boundary_maps_to_last_cell() {
        let g = grid4();
        assert_eq!(g.prefix_of_position(&Position::new(1000.0, 1000.0)), 15);
        assert_eq!(g.prefix_of_position(&Position::new(1000.0, 0.0)), 3);
    }

    #[test]
    fn prefix_six_rect() {
        let r = grid4().region(6).rect;
        assert_eq!((r.x1, r.x2, r.y1, r.y2), (500.0, 750.0, 250.0, 500.0));
    }

    #[test]
    fn shared_prefix_shares_region() {
        let g = grid4();
        assert_eq!(
            g.rr_of_group(GroupAddress::new(6, 1)),
            g.rr_of_group(GroupAddress::new(6, 99))
        );
    }

    #[test]
    fn rect_centers_map_back() {
        let g = AddressGrid::new(1234.5, 777.0, 7, 3, 8, 8).unwrap();
        for r in g.regions() {
            assert_eq!(g.prefix_of_position(&r.rect.center()), r.prefix);
        }
    }

    #[test]
    #[should_panic(expected = "outside area")]
    fn out_of_area_is_a_bug() {
        grid4().prefix_of_position(&Position::new(-1.0, 5.0));
    }

    #[test]
    fn promotion_rule() {
        assert_eq!(promotion_probability(true, 5, 5, 100.0), 0.0);
        assert_eq!(promotion_probability(true, 5, 9, 100.0), 0.0);
        assert_eq!(promotion_probability(false, 5, 0, 100.0), 0.0);
        assert!((promotion_probability(true, 5, 1, 100.0) - 0.04).abs() < 1e-12);
        assert_eq!(promotion_probability(true, 5, 0, 2.0), 1.0);
    }

    #[test]
    fn first_session_gets_suffix_zero() {
        let mut reg = SessionRegistry::default();
        let info = SessionInfo {
            addr: GroupAddress::new(0, 0),
            initiator: NodeId(1),
            registered_at: SimTime::ZERO,
            name: "a".into(),
        };
        assert_eq!(
            reg.assign(6, None, 255, info),
            Assignment::Confirmed(GroupAddress::new(6, 0))
        );
    }

    #[test]
    fn racing_requests_for_one_address() {
        let mut reg = SessionRegistry::default();
        let want = GroupAddress::new(3, 4);
        let mk = |n: u32| SessionInfo {
            addr: want,
            initiator: NodeId(n),
            registered_at: SimTime::ZERO,
            name: format!("s{}", n),
        };
        assert_eq!(reg.assign(3, Some(want), 255, mk(1)), Assignment::Confirmed(want));
        assert_eq!(
            reg.assign(3, Some(want), 255, mk(2)),
            Assignment::Rejected {
                alternative: GroupAddress::new(3, 0)
            }
        );
    }

    #[test]
    fn directory_prefix_skips_reserved_suffix() {
        let mut reg = SessionRegistry::default();
        let info = SessionInfo {
            addr: GroupAddress::new(0, 0),
            initiator: NodeId(1),
            registered_at: SimTime::ZERO,
            name: "a".into(),
        };
        assert_eq!(
            reg.assign(0, None, 255, info),
            Assignment::Confirmed(GroupAddress::new(0, 1))
        );
    }

    #[test]
    fn record_expiry_and_merge() {
        let g = GroupAddress::new(1, 1);
        let mut a = SdsRecord::new(g);
        a.upsert(
            NodeId(9),
            SenderEntry {
                approx_position: Position::new(1.0, 1.0),
                advert_time: SimTime::from_secs(1.0),
                route: Some(vec![NodeId(2), NodeId(9)]),
                stability: 1.0,
            },
        );
        let mut b = SdsRecord::new(g);
        b.merge(&a);
        assert_eq!(b.senders.len(), 1);
        assert!(b.senders[&NodeId(9)].route.is_none());
        b.expire(SimTime::from_secs(70.0), SimTime::from_secs(60.0));
        assert!(b.is_empty());
    }

    #[test]
    fn greedy_picks_strictly_closer() {
        let here = Position::new(0.0, 0.0);
        let target = Position::new(100.0, 0.0);
        let n = vec![
            (NodeId(1), Position::new(-10.0, 0.0)),
            (NodeId(2), Position::new(30.0, 10.0)),
            (NodeId(3), Position::new(40.0, 0.0)),
        ];
        assert_eq!(greedy_next_hop(&here, &target, n), Some(NodeId(3)));
        let void = vec![(NodeId(1), Position::new(-10.0, 0.0))];
        assert_eq!(greedy_next_hop(&here, &target, void), None);
    }
}
