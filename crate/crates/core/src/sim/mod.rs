//! The protocol engine: every node's state and the event handlers that drive it.
//!
//! [`World`] owns the kernel and a [`State`] with one [`NodeState`] per node.
//! Handlers are split by layer: zone and neighbor upkeep live here, contacts
//! and bordercast in `contact`, rendezvous regions and lollipop forwarding in
//! `rr`, and the multicast service in `mcast`.

mod contact;
mod mcast;
mod rr;

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::contacts::{contact_bound, median_energy_product, ContactEntry, RateEstimator, SelectionParams};
use crate::error::SimError;
use crate::geo::{Position, Rect};
use crate::kernel::{Delivery, EventHandle, Fired, Kernel, TraceEvent};
use crate::mobility::{link_availability, stability_from, LinkHistory, MobilityModel, Mover};
use crate::multicast::{MeshEntry, PopularityState};
use crate::packet::{Packet, PacketKind, Payload, Routing};
use crate::rendezvous::{AddressGrid, GroupAddress, SdsRecord, SessionRegistry};
use crate::scenario::{Directive, PlacementMode, Scenario};
use crate::time::SimTime;
use crate::zone::{LinkStateAdvert, LinkStateDb, MeshAdvert, ZoneTable};
use crate::NodeId;

pub use mcast::JoinPurpose;

/// Scenario values resolved into the units the handlers use.
#[derive(Debug, Clone)]
pub struct Params {
    pub radius: u32,
    pub range: f64,
    pub hello: SimTime,
    pub hold: SimTime,
    pub lsa_delay: SimTime,
    pub recompute_delay: SimTime,
    pub bordercast_rounds: u32,
    pub contacts_enabled: bool,
    pub maint_period: SimTime,
    pub contact_bound: usize,
    pub max_contacts: usize,
    pub selection: SelectionParams,
    pub capability_bonus: f64,
    pub activity_half_life: f64,
    pub l_limit: f64,
    pub zone_area: f64,
    pub adv_ttl: u32,
    pub adv_period: SimTime,
    pub member_expiry: SimTime,
    pub stage_timeout: SimTime,
    pub rr_timeout: SimTime,
    pub sender_ttl: SimTime,
    pub max_hops: u32,
    pub duration: SimTime,
    pub scenario: Scenario,
}

impl Params {
    pub fn resolve(s: &Scenario) -> Self {
        let radius = s.zone.radius;
        let range = s.radio.range_m;
        let hello = SimTime::from_secs(s.zone.hello_interval_s);
        let diag = (s.area.width_m.powi(2) + s.area.height_m.powi(2)).sqrt();
        let diameter_hops = (diag / range).ceil().max(1.0) as u32;
        let maint = s
            .contacts
            .maintenance_period_s
            .unwrap_or(2.0 * s.zone.hello_interval_s);
        let adv_period = s.mcast.adv_period_s;
        Params {
            radius,
            range,
            hello,
            hold: SimTime::from_secs(s.zone.hello_interval_s * s.zone.hold_factor),
            lsa_delay: SimTime::from_secs(s.zone.triggered_update_delay_s),
            recompute_delay: SimTime::from_secs(s.zone.recompute_delay_s),
            bordercast_rounds: s
                .zone
                .bordercast_rounds
                .unwrap_or_else(|| diameter_hops.div_ceil(radius).max(1)),
            contacts_enabled: s.contacts.enabled,
            maint_period: SimTime::from_secs(maint),
            contact_bound: contact_bound(radius),
            max_contacts: s.contacts.max_contacts,
            selection: SelectionParams {
                k: s.contacts.k,
                e_half: s.contacts.e_half.unwrap_or(1.0),
                a_half: s.contacts.a_half,
            },
            capability_bonus: s.contacts.capability_bonus,
            activity_half_life: s.contacts.activity_half_life_s,
            l_limit: s.rr.l_limit_m.unwrap_or(2.0 * range * radius as f64),
            zone_area: std::f64::consts::PI * (radius as f64 * range).powi(2),
            adv_ttl: s.mcast.adv_ttl.unwrap_or(radius + 2),
            adv_period: SimTime::from_secs(adv_period),
            member_expiry: SimTime::from_secs(s.mcast.member_expiry_s.unwrap_or(3.0 * adv_period)),
            stage_timeout: SimTime::from_secs(s.mcast.stage_timeout_s),
            rr_timeout: SimTime::from_secs(s.mcast.rr_timeout_s),
            sender_ttl: SimTime::from_secs(s.rr.sender_ttl_s),
            max_hops: s.rr.max_hops,
            duration: SimTime::from_secs(s.duration_s),
            scenario: s.clone(),
        }
    }
}

/// Timer events. Packet arrivals come through the kernel as [`Fired::Deliver`].
#[derive(Debug, Clone, PartialEq)]
pub enum Ev {
    MobilityTick,
    Hello(NodeId),
    LsaTrigger(NodeId),
    ZoneRecompute(NodeId),
    ContactMaint(NodeId),
    MaintTimeout(NodeId, u32),
    BordercastTimeout(NodeId, u32),
    SdsDecision(NodeId),
    SdsAdvertTick(NodeId),
    AdvTick(NodeId, GroupAddress),
    DataTick(NodeId, GroupAddress),
    StageTimeout(NodeId, GroupAddress, u32),
    RouteWaitDone(NodeId, GroupAddress, u32),
    JoinRetry(NodeId, GroupAddress),
    RegisterTimeout(NodeId, u32),
    GroupQueryStart(NodeId, GroupAddress),
    GroupQueryDone(NodeId, u32),
    LocalSync(NodeId, GroupAddress),
    MeshExpiry,
    Directive(usize),
    RouteQuery,
    Census,
}

impl Ev {
    fn node(&self) -> Option<NodeId> {
        match *self {
            Ev::Hello(n)
            | Ev::LsaTrigger(n)
            | Ev::ZoneRecompute(n)
            | Ev::ContactMaint(n)
            | Ev::MaintTimeout(n, _)
            | Ev::BordercastTimeout(n, _)
            | Ev::SdsDecision(n)
            | Ev::SdsAdvertTick(n)
            | Ev::AdvTick(n, _)
            | Ev::DataTick(n, _)
            | Ev::StageTimeout(n, _, _)
            | Ev::RouteWaitDone(n, _, _)
            | Ev::JoinRetry(n, _)
            | Ev::RegisterTimeout(n, _)
            | Ev::GroupQueryStart(n, _)
            | Ev::GroupQueryDone(n, _)
            | Ev::LocalSync(n, _) => Some(n),
            _ => None,
        }
    }
}

/// What a node last heard in a neighbor's hello.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub last_heard: SimTime,
    pub position: Position,
    pub energy_left: f64,
    pub drain: f64,
}

/// Best Adv path heard from one sender.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvSeen {
    /// me..sender
    pub route: Vec<NodeId>,
    pub stability: f64,
    pub seq: u32,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenderState {
    pub adv_seq: u32,
    pub data_seq: u32,
    pub data_left: u32,
    pub data_interval: SimTime,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub name: String,
    pub prefix: u32,
    pub requested: Option<GroupAddress>,
    pub attempt: u32,
    pub timer: Option<EventHandle>,
    pub started: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupQueryState {
    pub group: GroupAddress,
    pub members: BTreeSet<NodeId>,
    pub sds: BTreeSet<NodeId>,
}

/// Why a bordercast query is outstanding at its origin.
#[derive(Debug, Clone, PartialEq)]
pub enum PendingQuery {
    Contact(NodeId),
    Route { target: NodeId, started: SimTime },
    JoinRoute { group: GroupAddress, target: NodeId },
}

/// One mobile node.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub alive: bool,
    pub eligible: bool,
    pub e0: f64,
    pub drain: f64,
    pub pinned: bool,
    pub reported_pos: Position,
    pub neighbors: BTreeMap<NodeId, Neighbor>,
    pub links: BTreeMap<NodeId, LinkHistory>,
    pub a_hat: f64,
    pub lsa_seq: u32,
    pub lsa_pending: bool,
    pub recompute_pending: bool,
    pub lsdb: LinkStateDb,
    pub zone: ZoneTable,
    pub contacts: BTreeMap<NodeId, ContactEntry>,
    pub pending_queries: BTreeMap<u32, PendingQuery>,
    pub pending_maint: BTreeMap<u32, NodeId>,
    pub activity: RateEstimator,
    pub seen_queries: BTreeSet<(NodeId, u32)>,
    pub seen_floods: BTreeSet<(NodeId, u32)>,
    pub pkt_seq: u32,
    pub qid_seq: u32,
    pub sds_prefix: Option<u32>,
    pub heard_sds: BTreeMap<NodeId, (u32, SimTime)>,
    pub suppress_until: SimTime,
    pub records: BTreeMap<GroupAddress, SdsRecord>,
    pub sessions: SessionRegistry,
    pub local_sds: BTreeSet<GroupAddress>,
    pub popularity: BTreeMap<GroupAddress, PopularityState>,
    pub group_queries: BTreeMap<u32, GroupQueryState>,
    pub mesh: BTreeMap<GroupAddress, MeshEntry>,
    pub adv_cache: BTreeMap<GroupAddress, BTreeMap<NodeId, AdvSeen>>,
    pub joins: BTreeMap<GroupAddress, mcast::JoinState>,
    pub senders: BTreeMap<GroupAddress, SenderState>,
    pub registrations: BTreeMap<u32, Registration>,
    pub join_seq: u32,
    pub join_ids: u32,
    pub gq_scheduled: BTreeMap<GroupAddress, SimTime>,
    pub last_handoff: BTreeMap<GroupAddress, SimTime>,
}

impl NodeState {
    fn new(id: NodeId, radius: u32, pos: Position, half_life: f64) -> Self {
        NodeState {
            id,
            alive: true,
            eligible: true,
            e0: 0.0,
            drain: 1.0,
            pinned: false,
            reported_pos: pos,
            neighbors: BTreeMap::new(),
            links: BTreeMap::new(),
            a_hat: 0.5,
            lsa_seq: 0,
            lsa_pending: false,
            recompute_pending: false,
            lsdb: LinkStateDb::default(),
            zone: ZoneTable::empty(id, radius),
            contacts: BTreeMap::new(),
            pending_queries: BTreeMap::new(),
            pending_maint: BTreeMap::new(),
            activity: RateEstimator::new(half_life),
            seen_queries: BTreeSet::new(),
            seen_floods: BTreeSet::new(),
            pkt_seq: 0,
            qid_seq: 0,
            sds_prefix: None,
            heard_sds: BTreeMap::new(),
            suppress_until: SimTime::ZERO,
            records: BTreeMap::new(),
            sessions: SessionRegistry::default(),
            local_sds: BTreeSet::new(),
            popularity: BTreeMap::new(),
            group_queries: BTreeMap::new(),
            mesh: BTreeMap::new(),
            adv_cache: BTreeMap::new(),
            joins: BTreeMap::new(),
            senders: BTreeMap::new(),
            registrations: BTreeMap::new(),
            join_seq: 0,
            join_ids: 0,
            gq_scheduled: BTreeMap::new(),
            last_handoff: BTreeMap::new(),
        }
    }

    pub fn energy_left(&self, now: SimTime) -> f64 {
        (self.e0 - self.drain * now.as_secs()).max(0.0)
    }

    pub fn neighbor_ids(&self) -> Vec<NodeId> {
        self.neighbors.keys().copied().collect()
    }

    /// Serves as an SDS for `g`, either for its whole prefix or as a local SDS.
    pub fn is_sds_for(&self, g: GroupAddress) -> bool {
        self.sds_prefix == Some(g.prefix) || self.local_sds.contains(&g)
    }
}

/// Results of the per-event invariant checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub checks: u64,
    pub black_holes: u64,
    pub active_path_violations: u64,
    pub disjointness_violations: u64,
}

/// Everything but the kernel, so handlers can borrow both.
pub struct State {
    pub p: Params,
    pub grid: AddressGrid,
    pub nodes: Vec<NodeState>,
    pub movers: Vec<Mover>,
    pub rng: ChaCha8Rng,
    pub env: ChaCha8Rng,
    pub fatal: Option<SimError>,
    pub sweep: SweepStats,
    lost_links: Vec<(NodeId, NodeId)>,
    touched: Vec<NodeId>,
    route_load: Option<RouteLoad>,
}

#[derive(Debug, Clone, Copy)]
struct RouteLoad {
    until: SimTime,
    rate_hz: f64,
    rounds: u32,
}

/// A running simulation.
pub struct World {
    pub k: Kernel<Ev>,
    pub st: State,
}

impl World {
    pub fn new(s: &Scenario) -> Result<World, SimError> {
        s.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let p = Params::resolve(s);
        let grid = s.grid()?;
        let n = s.node_count;
        let (w, h) = (s.area.width_m, s.area.height_m);
        let mut env = ChaCha8Rng::seed_from_u64(s.seed);
        env.set_stream(u64::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(0);

        let mut positions = place(s, &mut env);
        let mut pinned = vec![false; n];
        for f in &s.placement.fixed {
            positions[f.id as usize] = Position::new(f.x, f.y);
            pinned[f.id as usize] = true;
        }
        let movers: Vec<Mover> = positions
            .iter()
            .enumerate()
            .map(|(i, &pos)| {
                let mut r = ChaCha8Rng::seed_from_u64(s.seed);
                r.set_stream(1 + i as u64);
                Mover::new(&s.mobility, pos, w, h, r)
            })
            .collect();

        let mut nodes: Vec<NodeState> = (0..n)
            .map(|i| NodeState::new(NodeId(i as u32), p.radius, positions[i], p.activity_half_life))
            .collect();
        let mut lifetimes = Vec::with_capacity(n);
        for (i, node) in nodes.iter_mut().enumerate() {
            node.e0 = s.energy.initial_j;
            node.drain = if s.energy.drain_max_w > s.energy.drain_min_w {
                env.random_range(s.energy.drain_min_w..=s.energy.drain_max_w)
            } else {
                s.energy.drain_min_w
            };
            node.eligible = env.random::<f64>() < s.rr.eligible_fraction || s.rr.eligible_fraction >= 1.0;
            node.pinned = pinned[i];
            lifetimes.push(node.e0 / node.drain);
        }
        let mut p = p;
        if s.contacts.e_half.is_none() {
            p.selection.e_half = median_energy_product(&lifetimes);
        }

        let mut k = Kernel::new(w, h, s.radio, positions, s.trace.level)?;
        k.record(
            None,
            "run_start",
            json!({
                "seed": s.seed, "nodes": n, "duration_s": s.duration_s,
                "join_grace_s": s.mcast.join_grace_s,
            }),
        );
        let mut st = State {
            p,
            grid,
            nodes,
            movers,
            rng,
            env,
            fatal: None,
            sweep: SweepStats::default(),
            lost_links: Vec::new(),
            touched: Vec::new(),
            route_load: None,
        };
        for i in 0..n {
            let id = NodeId(i as u32);
            st.nodes[i].reported_pos = st.noisy(k.position(id));
        }
        st.bootstrap_events(&mut k)?;
        Ok(World { k, st })
    }

    pub fn now(&self) -> SimTime {
        self.k.now()
    }

    /// Processes events up to `t` (clamped to the scenario duration).
    pub fn run_until(&mut self, t: SimTime) -> Result<(), SimError> {
        let t = t.min(self.st.p.duration);
        let World { k, st } = self;
        k.run_until(t, |k, fired| st.dispatch(k, fired));
        match self.st.fatal.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn run(&mut self) -> Result<(), SimError> {
        let d = self.st.p.duration;
        self.run_until(d)
    }

    /// Appends the end-of-run snapshots and returns the full trace.
    pub fn finish(mut self) -> Vec<TraceEvent> {
        self.st.snapshots(&mut self.k);
        self.k.take_trace().into_events()
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        &self.st.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.st.nodes
    }

    pub fn sweep_stats(&self) -> SweepStats {
        self.st.sweep
    }

    /// Connectivity graph of live nodes as adjacency lists.
    pub fn connectivity(&self) -> Vec<Vec<NodeId>> {
        (0..self.k.node_count())
            .map(|i| self.k.neighbors(NodeId(i as u32)).unwrap_or_default())
            .collect()
    }
}

fn place(s: &Scenario, env: &mut ChaCha8Rng) -> Vec<Position> {
    let n = s.node_count;
    let (w, h) = (s.area.width_m, s.area.height_m);
    match s.placement.mode {
        PlacementMode::Uniform => (0..n)
            .map(|_| Position::new(env.random_range(0.0..=w), env.random_range(0.0..=h)))
            .collect(),
        PlacementMode::Lattice => {
            let cols = ((n as f64 * w / h).sqrt().ceil() as usize).max(1);
            let rows = n.div_ceil(cols).max(1);
            let dx = w / cols as f64;
            let dy = h / rows as f64;
            (0..n)
                .map(|i| {
                    let (c, r) = (i % cols, i / cols);
                    Position::new((c as f64 + 0.5) * dx, (r as f64 + 0.5) * dy)
                })
                .collect()
        }
    }
}

impl State {
    pub fn now(k: &Kernel<Ev>) -> SimTime {
        k.now()
    }

    fn noisy(&mut self, p: Position) -> Position {
        let sigma = self.p.scenario.mobility.position_noise_m;
        if sigma <= 0.0 {
            return p;
        }
        use rand_distr::{Distribution, Normal};
        let nd = Normal::new(0.0, sigma).expect("sigma is positive");
        let (w, h) = (self.p.scenario.area.width_m, self.p.scenario.area.height_m);
        Position::new(
            (p.x + nd.sample(&mut self.env)).clamp(0.0, w),
            (p.y + nd.sample(&mut self.env)).clamp(0.0, h),
        )
    }

    fn bootstrap_events(&mut self, k: &mut Kernel<Ev>) -> Result<(), SimError> {
        let n = self.nodes.len();
        let hello = self.p.hello.as_secs();
        for i in 0..n {
            let id = NodeId(i as u32);
            let phase = self.env.random_range(0.0..hello);
            k.schedule(Ev::Hello(id), SimTime::from_secs(phase))?;
            if self.p.contacts_enabled {
                let ph = self.env.random_range(0.0..self.p.maint_period.as_secs());
                k.schedule(Ev::ContactMaint(id), SimTime::from_secs(ph) + self.p.maint_period)?;
            }
            if self.nodes[i].eligible {
                let rr = &self.p.scenario.rr;
                let ph = self.env.random_range(0.0..rr.decision_period_s);
                k.schedule(Ev::SdsDecision(id), SimTime::from_secs(rr.warmup_s + ph))?;
            }
        }
        let mob = &self.p.scenario.mobility;
        if mob.model != MobilityModel::Stationary {
            let first = SimTime::from_secs(mob.step_interval);
            if mob.stop_at_s.is_none_or(|s| first.as_secs() <= s) {
                k.schedule(Ev::MobilityTick, first)?;
            }
        }
        k.schedule(Ev::MeshExpiry, self.p.adv_period)?;
        k.schedule(Ev::Census, SimTime::ZERO)?;
        for (i, d) in self.p.scenario.workload.clone().iter().enumerate() {
            k.schedule(Ev::Directive(i), SimTime::from_secs(d.at_s()))?;
        }
        Ok(())
    }

    fn fail(&mut self, e: SimError) {
        if self.fatal.is_none() {
            self.fatal = Some(e);
        }
    }

    fn alive(&self, n: NodeId) -> bool {
        self.nodes[n.index()].alive
    }

    fn dispatch(&mut self, k: &mut Kernel<Ev>, fired: Fired<Ev>) {
        if self.fatal.is_some() {
            return;
        }
        let sweep_all = matches!(fired, Fired::Timer(Ev::MeshExpiry) | Fired::Timer(Ev::MobilityTick));
        match fired {
            Fired::Deliver(d) => self.on_delivery(k, d),
            Fired::Timer(ev) => {
                if let Some(n) = ev.node() {
                    if !self.alive(n) {
                        return;
                    }
                    self.touched.push(n);
                }
                self.on_timer(k, ev);
            }
        }
        self.process_lost_links(k);
        if self.p.scenario.debug.invariant_sweep {
            if sweep_all {
                for i in 0..self.nodes.len() {
                    self.check_node(k, NodeId(i as u32));
                }
            } else {
                let mut t = std::mem::take(&mut self.touched);
                t.sort_unstable();
                t.dedup();
                for n in t {
                    self.check_node(k, n);
                }
            }
        }
        self.touched.clear();
    }

    fn on_timer(&mut self, k: &mut Kernel<Ev>, ev: Ev) {
        match ev {
            Ev::MobilityTick => self.mobility_tick(k),
            Ev::Hello(n) => self.hello_tick(k, n),
            Ev::LsaTrigger(n) => {
                self.nodes[n.index()].lsa_pending = false;
                self.send_lsa(k, n);
            }
            Ev::ZoneRecompute(n) => self.zone_recompute(k, n),
            Ev::ContactMaint(n) => self.contact_maintenance(k, n),
            Ev::MaintTimeout(n, nonce) => self.maint_timeout(k, n, nonce),
            Ev::BordercastTimeout(n, qid) => self.bordercast_timeout(k, n, qid),
            Ev::SdsDecision(n) => self.sds_decision(k, n),
            Ev::SdsAdvertTick(n) => self.sds_advert_tick(k, n),
            Ev::AdvTick(n, g) => self.adv_tick(k, n, g),
            Ev::DataTick(n, g) => self.data_tick(k, n, g),
            Ev::StageTimeout(n, g, qid) => self.stage_timeout(k, n, g, qid),
            Ev::RouteWaitDone(n, g, qid) => self.route_wait_done(k, n, g, qid),
            Ev::JoinRetry(n, g) => self.join_retry(k, n, g),
            Ev::RegisterTimeout(n, id) => self.register_timeout(k, n, id),
            Ev::GroupQueryStart(n, g) => self.group_query_start(k, n, g),
            Ev::GroupQueryDone(n, qid) => self.group_query_done(k, n, qid),
            Ev::LocalSync(n, g) => self.local_sync(k, n, g),
            Ev::MeshExpiry => self.mesh_expiry(k),
            Ev::Directive(i) => self.directive(k, i),
            Ev::RouteQuery => self.route_query_tick(k),
            Ev::Census => self.census(k),
        }
    }

    fn on_delivery(&mut self, k: &mut Kernel<Ev>, d: Delivery) {
        for &(r, power) in &d.receivers {
            if !self.alive(r) {
                continue;
            }
            self.touched.push(r);
            self.on_packet(k, r, d.from, power, &d.packet);
            if self.fatal.is_some() {
                return;
            }
        }
    }

    /// Entry point for every received copy.
    fn on_packet(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, power: f64, pkt: &Rc<Packet>) {
        match &pkt.payload {
            Payload::Hello {
                position,
                energy_left,
                drain,
            } => {
                self.on_hello(k, me, from, power, *position, *energy_left, *drain);
                return;
            }
            Payload::LinkState(lsa) => {
                self.on_lsa(k, me, lsa.clone(), pkt);
                return;
            }
            _ => {}
        }
        let s = pkt.stability.min(self.link_stability(me, from));
        match &pkt.routing {
            Routing::Broadcast => self.on_flood(k, me, from, pkt, s),
            Routing::Source { route, pos } => {
                if route.get(*pos) != Some(&me) {
                    return;
                }
                if *pos + 1 == route.len() {
                    self.on_final(k, me, from, pkt, s);
                } else {
                    self.on_source_transit(k, me, from, pkt, s);
                }
            }
            Routing::Mesh => self.on_mesh_packet(k, me, from, pkt, s),
            Routing::Lar { .. } => self.lar_receive(k, me, from, pkt, s),
            Routing::Geocast { rect } => self.geocast_receive(k, me, from, pkt, *rect, s),
            Routing::ZoneOrRegion { rect } => self.zone_or_region_receive(k, me, from, pkt, *rect, s),
        }
    }

    /// Broadcast floods: Adv, local JoinQuery, GroupQuery.
    fn on_flood(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>, s: f64) {
        if !self.nodes[me.index()].seen_floods.insert(pkt.uid) {
            return;
        }
        let relay = match &pkt.payload {
            Payload::Adv { .. } => self.on_adv(k, me, from, pkt, s),
            Payload::JoinQuery { .. } => self.on_join_query(k, me, pkt),
            Payload::GroupQuery { .. } => self.on_group_query(k, me, pkt),
            _ => false,
        };
        if relay && pkt.ttl_hops > 0 && pkt.src != me {
            let mut copy = (**pkt).clone();
            copy.stability = s;
            if let Payload::Adv { stabilities, .. } = &mut copy.payload {
                stabilities.push(self.link_stability(me, from));
            }
            self.broadcast(k, me, copy);
        }
    }

    /// A source-routed packet reached the last node of its route.
    fn on_final(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>, s: f64) {
        match &pkt.payload {
            Payload::BordercastQuery { .. } => self.on_bordercast_query(k, me, pkt),
            Payload::BordercastReply { .. } => self.on_bordercast_reply(k, me, pkt),
            Payload::ContactMaint { .. } => self.on_maint_final(k, me, pkt),
            Payload::JoinQuery { .. } => {
                self.on_join_query(k, me, pkt);
            }
            Payload::JoinReply { .. } => self.on_join_reply(k, me, pkt, s),
            Payload::JoinRequest { .. } => self.on_join_request(k, me, from, pkt),
            Payload::JoinFail { .. } => self.on_join_fail(k, me, from, pkt),
            Payload::Prune { .. } => self.on_prune(k, me, from, pkt),
            Payload::SdsAdvert { .. } => self.on_sds_advert(k, me, pkt),
            Payload::SdsSync { .. } => self.on_sds_sync(me, pkt),
            Payload::SessionRegister { .. } => self.on_session_register(k, me, pkt, true),
            Payload::SessionReply { .. } => self.on_session_reply(k, me, pkt),
            Payload::GroupQueryReply { .. } => self.on_group_query_reply(me, pkt),
            Payload::GroupQuery { .. } => {
                self.on_group_query(k, me, pkt);
            }
            _ => {}
        }
    }

    fn on_source_transit(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>, s: f64) {
        match &pkt.payload {
            Payload::JoinRequest { .. } => self.on_join_request(k, me, from, pkt),
            Payload::BordercastQuery { .. } => {
                self.nodes[me.index()].activity.observe(k.now());
                self.forward_source(k, me, pkt, s);
            }
            Payload::ContactMaint { .. } => self.forward_maint(k, me, pkt),
            _ => {
                self.forward_source(k, me, pkt, s);
            }
        }
    }

    /// Moves a source-routed packet one hop on. Returns false on a broken link.
    fn forward_source(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Packet, s: f64) -> bool {
        let Routing::Source { route, pos } = &pkt.routing else {
            return false;
        };
        let next = route[pos + 1];
        let mut copy = pkt.clone();
        copy.stability = s;
        copy.routing = Routing::Source {
            route: route.clone(),
            pos: pos + 1,
        };
        if copy.ttl_hops == 0 {
            self.drop_packet(k, me, pkt.kind, "ttl");
            return false;
        }
        if self.unicast(k, me, next, copy) {
            true
        } else {
            self.drop_packet(k, me, pkt.kind, "link_break");
            false
        }
    }

    fn drop_packet(&mut self, k: &mut Kernel<Ev>, me: NodeId, kind: PacketKind, reason: &str) {
        k.record(
            Some(me),
            "delivery_failure",
            json!({"packet": kind.as_str(), "reason": reason}),
        );
    }

    // ---- transmission helpers ----

    fn next_uid(&mut self, me: NodeId) -> u32 {
        let n = &mut self.nodes[me.index()];
        n.pkt_seq += 1;
        n.pkt_seq
    }

    pub(crate) fn next_qid(&mut self, me: NodeId) -> u32 {
        let n = &mut self.nodes[me.index()];
        n.qid_seq += 1;
        n.qid_seq
    }

    fn packet(&mut self, me: NodeId, ttl: u32, routing: Routing, payload: Payload) -> Packet {
        let seq = self.next_uid(me);
        Packet::new(me, seq, ttl, routing, payload)
    }

    fn broadcast(&mut self, k: &mut Kernel<Ev>, me: NodeId, mut pkt: Packet) {
        if pkt.kind != PacketKind::ZoneLinkState && pkt.kind != PacketKind::Hello {
            pkt.record_hop(me);
        }
        if let Err(e) = k.transmit(me, pkt) {
            self.fail(e);
        }
    }

    /// One-hop unicast; a missing link is reported to the neighbor logic.
    fn unicast(&mut self, k: &mut Kernel<Ev>, me: NodeId, to: NodeId, mut pkt: Packet) -> bool {
        pkt.record_hop(me);
        match k.unicast(me, to, pkt) {
            Ok(true) => true,
            Ok(false) => {
                if self.nodes[me.index()].neighbors.contains_key(&to) {
                    self.lost_links.push((me, to));
                }
                false
            }
            Err(e) => {
                self.fail(e);
                false
            }
        }
    }

    /// Sends `payload` along `route` (which starts at `me`).
    fn send_source(&mut self, k: &mut Kernel<Ev>, me: NodeId, route: Vec<NodeId>, payload: Payload) -> bool {
        self.send_source_with(k, me, route, payload, Vec::new())
    }

    fn send_source_with(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        route: Vec<NodeId>,
        payload: Payload,
        record: Vec<NodeId>,
    ) -> bool {
        debug_assert_eq!(route.first(), Some(&me));
        if route.len() < 2 {
            return false;
        }
        let ttl = (route.len() as u32 + self.p.contact_bound as u32).max(self.p.max_hops);
        let next = route[1];
        let mut pkt = self.packet(me, ttl, Routing::Source { route, pos: 1 }, payload);
        pkt.path_record = record;
        let kind = pkt.kind;
        if self.unicast(k, me, next, pkt) {
            true
        } else {
            self.drop_packet(k, me, kind, "link_break");
            false
        }
    }

    /// Replies to the originator of `pkt` along its recorded path.
    fn reply_along(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Packet, payload: Payload) -> bool {
        let route = pkt.reverse_route(me);
        self.send_source(k, me, route, payload)
    }

    // ---- neighbor, link-state and zone upkeep ----

    pub(crate) fn link_stability(&self, me: NodeId, peer: NodeId) -> f64 {
        let n = &self.nodes[me.index()];
        match n.links.get(&peer) {
            Some(h) if h.has_samples() => stability_from(n.a_hat, h.latest_metric()),
            _ => self.p.scenario.mobility.availability_prior,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_hello(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        from: NodeId,
        power: f64,
        position: Position,
        energy_left: f64,
        drain: f64,
    ) {
        let now = k.now();
        let cap = self.p.scenario.mobility.power_ring_capacity;
        let node = &mut self.nodes[me.index()];
        let fresh = node
            .neighbors
            .insert(
                from,
                Neighbor {
                    last_heard: now,
                    position,
                    energy_left,
                    drain,
                },
            )
            .is_none();
        let h = node.links.entry(from).or_insert_with(|| LinkHistory::new(from, cap));
        h.link_up(now);
        h.push_sample(now, power);
        if fresh {
            self.neighbor_set_changed(k, me);
        }
    }

    fn neighbor_set_changed(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let node = &mut self.nodes[me.index()];
        if !node.lsa_pending {
            node.lsa_pending = true;
            k.schedule_in(Ev::LsaTrigger(me), self.p.lsa_delay);
        }
        self.schedule_recompute(k, me);
    }

    fn schedule_recompute(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let node = &mut self.nodes[me.index()];
        if !node.recompute_pending {
            node.recompute_pending = true;
            k.schedule_in(Ev::ZoneRecompute(me), self.p.recompute_delay);
        }
    }

    fn hello_tick(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let now = k.now();
        let hold = self.p.hold;
        let lost: Vec<NodeId> = self.nodes[me.index()]
            .neighbors
            .iter()
            .filter(|(_, nb)| now.saturating_sub(nb.last_heard) > hold)
            .map(|(id, _)| *id)
            .collect();
        for l in lost {
            self.lose_neighbor(k, me, l);
        }
        let horizon = self.p.maint_period.as_secs();
        let mob = &self.p.scenario.mobility;
        let (min_samples, prior) = (mob.availability_min_samples, mob.availability_prior);
        let node = &mut self.nodes[me.index()];
        node.a_hat = link_availability(node.links.values(), horizon, now, min_samples, prior);
        if node.lsdb.expire(now, hold) {
            self.schedule_recompute(k, me);
        }
        let node = &self.nodes[me.index()];
        let payload = Payload::Hello {
            position: node.reported_pos,
            energy_left: node.energy_left(now),
            drain: node.drain,
        };
        let pkt = self.packet(me, 1, Routing::Broadcast, payload);
        self.broadcast(k, me, pkt);
        self.send_lsa(k, me);
        self.handoff_check(k, me);
        k.schedule_in(Ev::Hello(me), self.p.hello);
    }

    fn send_lsa(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        node.lsa_seq += 1;
        let mesh: Vec<MeshAdvert> = node
            .mesh
            .values()
            .filter(|e| e.on_mesh())
            .map(|e| MeshAdvert {
                group: e.group,
                depth: e.depth,
            })
            .collect();
        let lsa = LinkStateAdvert {
            origin: me,
            seq: node.lsa_seq,
            neighbors: node.neighbor_ids(),
            position: node.reported_pos,
            energy_left: node.energy_left(now),
            drain: node.drain,
            contact_count: node.contacts.len() as u32,
            sds_prefix: node.sds_prefix,
            local_sds_groups: node.local_sds.iter().copied().collect(),
            mesh,
        };
        let pkt = self.packet(me, self.p.radius, Routing::Broadcast, Payload::LinkState(Rc::new(lsa)));
        self.broadcast(k, me, pkt);
    }

    fn on_lsa(&mut self, k: &mut Kernel<Ev>, me: NodeId, lsa: Rc<LinkStateAdvert>, pkt: &Rc<Packet>) {
        if lsa.origin == me {
            return;
        }
        let acc = self.nodes[me.index()].lsdb.accept(lsa, k.now());
        if !acc.is_new() {
            return;
        }
        if acc == crate::zone::Accepted::Changed {
            self.schedule_recompute(k, me);
        }
        if pkt.ttl_hops > 0 {
            let copy = (**pkt).clone();
            self.broadcast(k, me, copy);
        }
    }

    /// Drops `lost` from `me`'s neighbor table and repairs whatever used the link.
    fn lose_neighbor(&mut self, k: &mut Kernel<Ev>, me: NodeId, lost: NodeId) {
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        if node.neighbors.remove(&lost).is_none() {
            return;
        }
        if let Some(h) = node.links.get_mut(&lost) {
            h.link_down(now);
        }
        self.neighbor_set_changed(k, me);
        self.mesh_neighbor_lost(k, me, lost);
    }

    fn process_lost_links(&mut self, k: &mut Kernel<Ev>) {
        while let Some((me, lost)) = self.lost_links.pop() {
            if self.alive(me) {
                self.touched.push(me);
                self.lose_neighbor(k, me, lost);
            }
        }
    }

    fn zone_recompute(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let node = &mut self.nodes[me.index()];
        node.recompute_pending = false;
        let own = node.neighbor_ids();
        let mut table = ZoneTable::compute(me, self.p.radius, &own, &node.lsdb);
        let old = std::mem::replace(&mut node.zone, ZoneTable::empty(me, self.p.radius));
        let changed = !old.same_membership(&table)
            || old.members.iter().zip(table.members.iter()).any(|(a, b)| a.1.hops != b.1.hops)
            || old.border_set != table.border_set;
        table.version = old.version + u64::from(changed);
        node.zone = table;
        if !old.same_membership(&node.zone) {
            let size = node.zone.members.len();
            let border = node.zone.border_set.len();
            k.record(Some(me), "zone_update", json!({"members": size, "border": border}));
            self.contacts_on_zone_change(k, me, &old);
        }
    }

    // ---- mobility ----

    fn mobility_tick(&mut self, k: &mut Kernel<Ev>) {
        let mob = self.p.scenario.mobility.clone();
        let dt = mob.step_interval;
        let mut positions = k.positions().to_vec();
        for (i, m) in self.movers.iter_mut().enumerate() {
            if !self.nodes[i].pinned && self.nodes[i].alive {
                positions[i] = m.step(&mob, dt);
            }
        }
        k.set_positions(positions);
        for i in 0..self.nodes.len() {
            let p = k.positions()[i];
            let r = self.noisy(p);
            self.nodes[i].reported_pos = r;
        }
        for i in 0..self.nodes.len() {
            let id = NodeId(i as u32);
            if self.nodes[i].alive {
                self.check_region_exit(k, id);
            }
        }
        let next = k.now() + SimTime::from_secs(dt);
        if mob.stop_at_s.is_none_or(|s| next.as_secs() <= s + 1e-9) {
            k.schedule_in(Ev::MobilityTick, SimTime::from_secs(dt));
        }
    }

    // ---- workload ----

    fn directive(&mut self, k: &mut Kernel<Ev>, i: usize) {
        let d = self.p.scenario.workload[i].clone();
        match d {
            Directive::RegisterSession {
                node, name, requested, ..
            } => {
                let n = NodeId(node);
                if self.alive(n) {
                    self.touched.push(n);
                    self.register_session(k, n, name, requested);
                }
            }
            Directive::StartSender { node, group, .. } => {
                let n = NodeId(node);
                if self.alive(n) {
                    self.touched.push(n);
                    self.start_sender(k, n, group);
                }
            }
            Directive::SendData {
                node,
                group,
                rate_hz,
                count,
                size_bytes,
                ..
            } => {
                let n = NodeId(node);
                if self.alive(n) {
                    self.touched.push(n);
                    self.start_data(k, n, group, rate_hz, count, size_bytes);
                }
            }
            Directive::Join { node, group, .. } => {
                let n = NodeId(node);
                k.record(Some(n), "member_join", json!({"group": group}));
                if self.alive(n) {
                    self.touched.push(n);
                    self.start_join(k, n, group, JoinPurpose::Member);
                }
            }
            Directive::Leave { node, group, .. } => {
                let n = NodeId(node);
                k.record(Some(n), "member_leave", json!({"group": group}));
                if self.alive(n) {
                    self.touched.push(n);
                    self.leave(k, n, group);
                }
            }
            Directive::FailNode { node, .. } => self.kill(k, NodeId(node)),
            Directive::Partition { rect, .. } => {
                let victims: Vec<NodeId> = (0..self.nodes.len())
                    .map(|i| NodeId(i as u32))
                    .filter(|&n| self.alive(n) && rect.contains_closed(&k.position(n)))
                    .collect();
                k.record(None, "partition", json!({"rect": rect, "nodes": victims.len()}));
                for v in victims {
                    self.kill(k, v);
                }
            }
            Directive::RouteQueries {
                until_s, rate_hz, rounds, ..
            } => {
                self.route_load = Some(RouteLoad {
                    until: SimTime::from_secs(until_s),
                    rate_hz,
                    rounds,
                });
                self.route_query_tick(k);
            }
            Directive::Bootstrap { node, .. } => {
                let n = NodeId(node);
                if self.alive(n) {
                    self.touched.push(n);
                    self.start_join(k, n, GroupAddress::SESSION_DIRECTORY, JoinPurpose::Bootstrap);
                }
            }
        }
    }

    fn kill(&mut self, k: &mut Kernel<Ev>, n: NodeId) {
        if !self.alive(n) {
            return;
        }
        self.nodes[n.index()].alive = false;
        k.kill(n);
        k.record(Some(n), "node_fail", json!({}));
    }

    /// Background discovery load: random origin and target, one bordercast each.
    fn route_query_tick(&mut self, k: &mut Kernel<Ev>) {
        let Some(load) = self.route_load else { return };
        let now = k.now();
        if now > load.until {
            return;
        }
        let n = self.nodes.len();
        if n >= 2 {
            let a = NodeId(self.rng.random_range(0..n as u32));
            let b = NodeId(self.rng.random_range(0..n as u32));
            if a != b && self.alive(a) && self.alive(b) {
                self.touched.push(a);
                self.route_query(k, a, b, load.rounds);
            }
        }
        let u: f64 = self.rng.random_range(f64::EPSILON..1.0);
        let gap = -u.ln() / load.rate_hz;
        k.schedule_in(Ev::RouteQuery, SimTime::from_secs(gap).max(SimTime::from_micros(1)));
    }

    /// Ground-truth SDS count per region, sampled every SDS advert period.
    fn census(&mut self, k: &mut Kernel<Ev>) {
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for node in self.nodes.iter().filter(|n| n.alive) {
            if let Some(p) = node.sds_prefix {
                *counts.entry(p).or_default() += 1;
            }
        }
        let c: Vec<[u32; 2]> = counts.into_iter().map(|(p, c)| [p, c]).collect();
        k.record(None, "sds_count", json!({"counts": c}));
        let period = SimTime::from_secs(self.p.scenario.rr.advert_period_s);
        if k.now() + period <= self.p.duration {
            k.schedule_in(Ev::Census, period);
        }
    }

    // ---- invariants and snapshots ----

    fn check_node(&mut self, k: &mut Kernel<Ev>, n: NodeId) {
        let node = &self.nodes[n.index()];
        if !node.alive {
            return;
        }
        self.sweep.checks += 1;
        let mut holes = 0u64;
        let mut bad_active = 0u64;
        for e in node.mesh.values() {
            holes += e.black_holes().len() as u64;
            if e.joined() && e.active_path_count() != 1 {
                bad_active += 1;
            }
        }
        let overlap = node.contacts.keys().filter(|c| node.zone.contains(**c)).count() as u64;
        if holes + bad_active > 0 {
            k.record(
                Some(n),
                "invariant_violation",
                json!({"black_holes": holes, "active_path_violations": bad_active}),
            );
        }
        self.sweep.black_holes += holes;
        self.sweep.active_path_violations += bad_active;
        self.sweep.disjointness_violations += overlap;
    }

    fn snapshots(&mut self, k: &mut Kernel<Ev>) {
        for node in &self.nodes {
            if !node.alive {
                continue;
            }
            let members: Vec<[u32; 2]> = node.zone.members.iter().map(|(m, z)| [m.0, z.hops]).collect();
            let border: Vec<u32> = node.zone.border_set.iter().map(|b| b.0).collect();
            k.record(
                Some(node.id),
                "zone_snapshot",
                json!({"members": members, "border": border}),
            );
            if !node.contacts.is_empty() {
                let cs: Vec<[u32; 2]> = node
                    .contacts
                    .values()
                    .map(|c| [c.contact.0, c.hops() as u32])
                    .collect();
                k.record(Some(node.id), "contact_snapshot", json!({"contacts": cs}));
            }
        }
        let tx: BTreeMap<&str, u64> = k.tx_counts().iter().map(|(kd, c)| (kd.as_str(), *c)).collect();
        let tx = json!(tx);
        k.record(None, "tx_summary", tx);
        let s = self.sweep;
        k.record(
            None,
            "invariant_summary",
            json!({
                "enabled": self.p.scenario.debug.invariant_sweep,
                "checks": s.checks,
                "black_holes": s.black_holes,
                "active_path_violations": s.active_path_violations,
                "disjointness_violations": s.disjointness_violations,
            }),
        );
    }

    /// Zone members whose advert matches `pred`, nearest first, with their hop counts.
    pub(crate) fn zone_members_where<F>(&self, me: NodeId, pred: F) -> Vec<(NodeId, u32)>
    where
        F: Fn(&LinkStateAdvert) -> bool,
    {
        let node = &self.nodes[me.index()];
        let mut out: Vec<(NodeId, u32)> = node
            .zone
            .members
            .iter()
            .filter(|(m, _)| node.lsdb.get(**m).is_some_and(&pred))
            .map(|(m, z)| (*m, z.hops))
            .collect();
        out.sort_by_key(|&(m, h)| (h, m));
        out
    }

    /// `[me] + intra-zone route to dest`.
    pub(crate) fn zone_route(&self, me: NodeId, dest: NodeId) -> Option<Vec<NodeId>> {
        let node = &self.nodes[me.index()];
        let mut r = crate::zone::intra_zone_route(&node.zone, dest)?;
        if !node.neighbors.contains_key(&r[0]) {
            return None;
        }
        r.insert(0, me);
        Some(r)
    }

    pub(crate) fn rect_of(&self, prefix: u32) -> Rect {
        self.grid.region(prefix).rect
    }
}
