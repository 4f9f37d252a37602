//! Per-node zone: proactive link-state view of every node within `R` hops.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::geo::Position;
use crate::rendezvous::GroupAddress;
use crate::time::SimTime;
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZoneConfig {
    #[serde(rename = "radius_R")]
    pub radius: u32,
    pub hello_interval_s: f64,
    /// A neighbor or advert not refreshed for this many hello intervals is dropped.
    pub hold_factor: f64,
    /// Bordercast budget in zone crossings; `None` derives `ceil(diameter / R)`.
    pub bordercast_rounds: Option<u32>,
    /// Coalescing delay for adverts triggered by a neighbor change.
    pub triggered_update_delay_s: f64,
    /// Delay between an advert changing the link-state view and the zone recomputation.
    pub recompute_delay_s: f64,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        ZoneConfig {
            radius: 2,
            hello_interval_s: 1.0,
            hold_factor: 2.5,
            bordercast_rounds: None,
            triggered_update_delay_s: 0.05,
            recompute_delay_s: 0.01,
        }
    }
}

impl ZoneConfig {
    pub fn validate(&self) -> Result<(), crate::error::SimError> {
        use crate::error::SimError;
        if self.radius == 0 {
            return Err(SimError::Config("zone.radius_R must be >= 1".into()));
        }
        if !(self.hello_interval_s > 0.0) || !(self.hold_factor > 1.0) {
            return Err(SimError::Config(
                "zone.hello_interval_s must be > 0 and zone.hold_factor > 1".into(),
            ));
        }
        if matches!(self.bordercast_rounds, Some(0)) {
            return Err(SimError::Config("zone.bordercast_rounds must be >= 1".into()));
        }
        if !(self.triggered_update_delay_s >= 0.0) || !(self.recompute_delay_s >= 0.0) {
            return Err(SimError::Config("zone delays must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mesh membership a node piggybacks on its adverts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MeshAdvert {
    pub group: GroupAddress,
    /// Hops to the nearest sender along the active mesh, `u32::MAX` if unknown.
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkStateAdvert {
    pub origin: NodeId,
    pub seq: u32,
    /// Sorted neighbor list as seen by `origin`.
    pub neighbors: Vec<NodeId>,
    pub position: Position,
    pub energy_left: f64,
    pub drain: f64,
    /// Number of contacts currently held by `origin`.
    pub contact_count: u32,
    /// Prefix for which `origin` is a rendezvous-region SDS.
    pub sds_prefix: Option<u32>,
    /// Groups for which `origin` runs a popularity-promoted local SDS.
    pub local_sds_groups: Vec<GroupAddress>,
    pub mesh: Vec<MeshAdvert>,
}

#[derive(Debug, Clone)]
pub struct StoredAdvert {
    pub lsa: Rc<LinkStateAdvert>,
    pub received: SimTime,
}

/// Result of offering an advert to the database.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accepted {
    /// Same or older sequence; ignore and do not relay.
    Stale,
    /// Newer sequence with an unchanged neighbor list.
    Refreshed,
    /// New origin or a changed neighbor list: the zone must be recomputed.
    Changed,
}

impl Accepted {
    pub fn is_new(self) -> bool {
        self != Accepted::Stale
    }
}

/// Latest advert per origin.
#[derive(Debug, Clone, Default)]
pub struct LinkStateDb {
    entries: BTreeMap<NodeId, StoredAdvert>,
}

impl LinkStateDb {
    /// Stores the advert if it is newer than what we hold.
    pub fn accept(&mut self, lsa: Rc<LinkStateAdvert>, now: SimTime) -> Accepted {
        match self.entries.get_mut(&lsa.origin) {
            Some(cur) if cur.lsa.seq >= lsa.seq => Accepted::Stale,
            Some(cur) => {
                let changed = cur.lsa.neighbors != lsa.neighbors;
                cur.lsa = lsa;
                cur.received = now;
                if changed {
                    Accepted::Changed
                } else {
                    Accepted::Refreshed
                }
            }
            None => {
                self.entries.insert(
                    lsa.origin,
                    StoredAdvert {
                        lsa,
                        received: now,
                    },
                );
                Accepted::Changed
            }
        }
    }

    pub fn get(&self, origin: NodeId) -> Option<&LinkStateAdvert> {
        self.entries.get(&origin).map(|s| s.lsa.as_ref())
    }

    pub fn expire(&mut self, now: SimTime, max_age: SimTime) -> bool {
        let before = self.entries.len();
        self.entries
            .retain(|_, s| now.saturating_sub(s.received) <= max_age);
        before != self.entries.len()
    }

    pub fn remove(&mut self, origin: NodeId) {
        self.entries.remove(&origin);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &LinkStateAdvert)> {
        self.entries.iter().map(|(k, v)| (k, v.lsa.as_ref()))
    }
}

/// Reusable visited set for zone BFS, indexed by node id and reset by
/// bumping a generation counter.
#[derive(Default)]
struct Visited {
    gen: u32,
    stamp: Vec<u32>,
}

impl Visited {
    fn begin(&mut self) -> &mut Self {
        self.gen = self.gen.wrapping_add(1);
        if self.gen == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.gen = 1;
        }
        self
    }

    /// Marks `n`; true if it was not yet marked.
    fn mark(&mut self, n: NodeId) -> bool {
        let i = n.index();
        if i >= self.stamp.len() {
            self.stamp.resize(i + 1, 0);
        }
        let fresh = self.stamp[i] != self.gen;
        self.stamp[i] = self.gen;
        fresh
    }

    fn contains(&self, n: NodeId) -> bool {
        self.stamp.get(n.index()) == Some(&self.gen)
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Visited> = std::cell::RefCell::new(Visited::default());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZoneMember {
    pub hops: u32,
    pub next_hop: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneTable {
    pub owner: NodeId,
    pub radius: u32,
    pub members: BTreeMap<NodeId, ZoneMember>,
    pub border_set: BTreeSet<NodeId>,
    pub version: u64,
    pred: BTreeMap<NodeId, NodeId>,
}

impl ZoneTable {
    pub fn empty(owner: NodeId, radius: u32) -> Self {
        ZoneTable {
            owner,
            radius,
            members: BTreeMap::new(),
            border_set: BTreeSet::new(),
            version: 0,
            pred: BTreeMap::new(),
        }
    }

    /// Shortest-path BFS over the owner's own neighbors and the stored adverts.
    pub fn compute(owner: NodeId, radius: u32, own_neighbors: &[NodeId], db: &LinkStateDb) -> Self {
        SCRATCH.with(|cell| {
            let mut scratch = cell.borrow_mut();
            let seen = scratch.begin();
            // (node, member, predecessor) in BFS order.
            let mut order: Vec<(NodeId, ZoneMember, NodeId)> = Vec::new();
            seen.mark(owner);
            if radius > 0 {
                let mut sorted: Vec<NodeId> = own_neighbors.iter().copied().filter(|&n| n != owner).collect();
                sorted.sort_unstable();
                sorted.dedup();
                for n in sorted {
                    seen.mark(n);
                    order.push((n, ZoneMember { hops: 1, next_hop: n }, owner));
                }
            }
            let mut head = 0;
            while head < order.len() {
                let (u, du, _) = order[head];
                head += 1;
                if du.hops >= radius {
                    continue;
                }
                let Some(lsa) = db.get(u) else { continue };
                for &v in &lsa.neighbors {
                    if seen.mark(v) {
                        order.push((
                            v,
                            ZoneMember {
                                hops: du.hops + 1,
                                next_hop: du.next_hop,
                            },
                            u,
                        ));
                    }
                }
            }
            let mut border = Vec::new();
            for &(m, info, _) in &order {
                let outward = info.hops == radius
                    || db
                        .get(m)
                        .is_some_and(|lsa| lsa.neighbors.iter().any(|v| !seen.contains(*v)));
                if outward {
                    border.push(m);
                }
            }
            order.sort_unstable_by_key(|e| e.0);
            border.sort_unstable();
            ZoneTable {
                owner,
                radius,
                members: order.iter().map(|&(n, m, _)| (n, m)).collect(),
                border_set: border.into_iter().collect(),
                version: 0,
                pred: order.iter().map(|&(n, _, p)| (n, p)).collect(),
            }
        })
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.members.contains_key(&n)
    }

    pub fn hops_to(&self, n: NodeId) -> Option<u32> {
        self.members.get(&n).map(|m| m.hops)
    }

    pub fn same_membership(&self, other: &ZoneTable) -> bool {
        self.members.len() == other.members.len()
            && self.members.keys().eq(other.members.keys())
    }

    pub fn member_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.keys().copied()
    }
}

pub fn border_nodes(table: &ZoneTable) -> &BTreeSet<NodeId> {
    &table.border_set
}

/// Shortest intra-zone path `owner -> dest`, excluding the owner itself.
pub fn intra_zone_route(table: &ZoneTable, dest: NodeId) -> Option<Vec<NodeId>> {
    if !table.members.contains_key(&dest) {
        return None;
    }
    let mut path = vec![dest];
    let mut cur = dest;
    while let Some(&p) = table.pred.get(&cur) {
        if p == table.owner {
            break;
        }
        path.push(p);
        cur = p;
    }
    path.reverse();
    debug_assert_eq!(path.first().copied(), table.members.get(&dest).map(|m| m.next_hop));
    Some(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lsa(origin: u32, neighbors: &[u32]) -> Rc<LinkStateAdvert> {
        Rc::new(LinkStateAdvert {
            origin: NodeId(origin),
            seq: 1,
            neighbors: neighbors.iter().map(|&n| NodeId(n)).collect(),
            position: Position::default(),
            energy_left: 1.0,
            drain: 1.0,
            contact_count: 0,
            sds_prefix: None,
            local_sds_groups: Vec::new(),
            mesh: Vec::new(),
        })
    }

    /// Adjacency lists for a graph; returns (own neighbors of `owner`, db of all others).
    fn db_for(adj: &[Vec<u32>], owner: u32) -> (Vec<NodeId>, LinkStateDb) {
        let mut db = LinkStateDb::default();
        for (i, ns) in adj.iter().enumerate() {
            if i as u32 != owner {
                db.accept(lsa(i as u32, ns), SimTime::ZERO);
            }
        }
        (
            adj[owner as usize].iter().map(|&n| NodeId(n)).collect(),
            db,
        )
    }

    fn line(n: u32) -> Vec<Vec<u32>> {
        (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect()
    }

    #[test]
    fn isolated_node() {
        let t = ZoneTable::compute(NodeId(0), 2, &[], &LinkStateDb::default());
        assert!(t.members.is_empty());
        assert!(t.border_set.is_empty());
    }

    #[test]
    fn five_node_line_center() {
        let (own, db) = db_for(&line(5), 2);
        let t = ZoneTable::compute(NodeId(2), 2, &own, &db);
        let hops: Vec<(u32, u32)> = t.members.iter().map(|(k, v)| (k.0, v.hops)).collect();
        assert_eq!(hops, vec![(0, 2), (1, 1), (3, 1), (4, 2)]);
        assert_eq!(
            border_nodes(&t).iter().map(|n| n.0).collect::<Vec<_>>(),
            vec![0, 4]
        );
    }

    #[test]
    fn complete_graph_radius_one() {
        let adj: Vec<Vec<u32>> = (0..10)
            .map(|i| (0..10).filter(|&j| j != i).collect())
            .collect();
        let (own, db) = db_for(&adj, 0);
        let t = ZoneTable::compute(NodeId(0), 1, &own, &db);
        assert_eq!(t.members.len(), 9);
        assert_eq!(t.border_set.len(), 9);
    }

    #[test]
    fn star_inside_zone_has_no_border() {
        let adj = vec![vec![1, 2, 3], vec![0], vec![0], vec![0]];
        let (own, db) = db_for(&adj, 0);
        let t = ZoneTable::compute(NodeId(0), 2, &own, &db);
        assert_eq!(t.members.len(), 3);
        assert!(t.border_set.is_empty());
    }

    #[test]
    fn seven_line_end_node_border() {
        let (own, db) = db_for(&line(7), 0);
        let t = ZoneTable::compute(NodeId(0), 2, &own, &db);
        assert_eq!(t.border_set.iter().copied().collect::<Vec<_>>(), vec![NodeId(2)]);
    }

    #[test]
    fn routes() {
        let (own, db) = db_for(&line(3), 0);
        let t = ZoneTable::compute(NodeId(0), 2, &own, &db);
        assert_eq!(intra_zone_route(&t, NodeId(1)), Some(vec![NodeId(1)]));
        assert_eq!(intra_zone_route(&t, NodeId(2)), Some(vec![NodeId(1), NodeId(2)]));
        let (own, db) = db_for(&line(5), 0);
        let t = ZoneTable::compute(NodeId(0), 2, &own, &db);
        assert_eq!(intra_zone_route(&t, NodeId(4)), None);
    }

    #[test]
    fn newer_seq_supersedes() {
        let mut db = LinkStateDb::default();
        assert_eq!(db.accept(lsa(1, &[2]), SimTime::ZERO), Accepted::Changed);
        assert_eq!(db.accept(lsa(1, &[3]), SimTime::ZERO), Accepted::Stale);
        let mut newer = (*lsa(1, &[3])).clone();
        newer.seq = 2;
        assert_eq!(db.accept(Rc::new(newer.clone()), SimTime::ZERO), Accepted::Changed);
        newer.seq = 3;
        assert_eq!(db.accept(Rc::new(newer), SimTime::ZERO), Accepted::Refreshed);
        assert_eq!(db.get(NodeId(1)).unwrap().neighbors, vec![NodeId(3)]);
    }
}
