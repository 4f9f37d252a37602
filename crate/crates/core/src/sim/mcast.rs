//! Multicast service: sender adverts, staged join discovery, mesh upkeep and data.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use rand::Rng;
use serde_json::json;

use super::{AdvSeen, Ev, GroupQueryState, SenderState, State};
use crate::kernel::Kernel;
use crate::multicast::{rank_candidates, BranchChange, Candidate, CandidateSource, MeshEntry, PopularityState, UpstreamPath};
use crate::packet::{simple_path, MemberKey, Packet, Payload, QueryPurpose, QueryTarget, Routing, SenderInfo};
use crate::rendezvous::{GroupAddress, SdsRecord, SenderEntry};
use crate::time::SimTime;
use crate::NodeId;

/// Contact-stage depth marking a query that must be answered, not forwarded.
const TERMINAL: u8 = u8::MAX;
/// Bordercast wait per round for sender route discovery.
const ROUTE_ROUND_WAIT_S: f64 = 0.5;
/// How far the harness looks for the nearest mesh point.
const MESH_DISTANCE_LIMIT: u32 = 32;

const STAGE_NAMES: [&str; 5] = ["adv_cache", "zone_sds", "contacts", "local_broadcast", "rr"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinPurpose {
    Member,
    /// Session-directory lookup; done once any server answers.
    Bootstrap,
}

/// A join in progress at a receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinState {
    pub purpose: JoinPurpose,
    pub jid: u32,
    pub qid: u32,
    pub stage: u8,
    pub started: SimTime,
    pub attempt: u32,
    pub cands: Vec<Candidate>,
    /// Senders known only by identity (no usable route yet).
    pub unrouted: BTreeSet<NodeId>,
    pub waiting_routes: bool,
    pub reply_hops: u32,
    pub reply_stage: u8,
}

impl State {
    fn entry(&mut self, me: NodeId, g: GroupAddress) -> &mut MeshEntry {
        self.nodes[me.index()].mesh.entry(g).or_insert_with(|| MeshEntry::new(g))
    }

    fn trace_stage(&self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, jid: u32, stage: u8, outcome: &str, hops: u32) {
        k.record(
            Some(me),
            "join_stage",
            json!({
                "group": g, "join": jid, "stage": stage, "name": STAGE_NAMES[stage as usize],
                "outcome": outcome, "hops": hops,
            }),
        );
    }

    // ---- senders ----

    pub(super) fn start_sender(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let e = self.entry(me, g);
        e.sender = true;
        e.depth = 0;
        self.nodes[me.index()].senders.entry(g).or_insert(SenderState {
            adv_seq: 0,
            data_seq: 0,
            data_left: 0,
            data_interval: SimTime::from_secs(1.0),
            size: 0,
        });
        k.record(Some(me), "sender_start", json!({"group": g}));
        self.adv_tick(k, me, g);
    }

    pub(super) fn start_data(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, rate: f64, count: u32, size: u32) {
        if !self.nodes[me.index()].senders.contains_key(&g) {
            self.start_sender(k, me, g);
        }
        let s = self.nodes[me.index()].senders.get_mut(&g).expect("sender state");
        s.data_left += count;
        s.data_interval = SimTime::from_secs(1.0 / rate);
        s.size = size;
        self.data_tick(k, me, g);
    }

    pub(super) fn adv_tick(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let Some(s) = self.nodes[me.index()].senders.get_mut(&g) else {
            return;
        };
        s.adv_seq += 1;
        let seq = s.adv_seq;
        let pos = self.nodes[me.index()].reported_pos;
        let payload = Payload::Adv {
            group: g,
            sender: me,
            seq,
            sender_pos: pos,
            stabilities: Vec::new(),
        };
        let pkt = self.packet(me, self.p.adv_ttl, Routing::Broadcast, payload.clone());
        self.nodes[me.index()].seen_floods.insert(pkt.uid);
        self.broadcast(k, me, pkt);
        // Keep the rendezvous region's record fresh.
        let now = k.now();
        if self.nodes[me.index()].is_sds_for(g) {
            let rec = self.nodes[me.index()].records.entry(g).or_insert_with(|| SdsRecord::new(g));
            rec.upsert(
                me,
                SenderEntry {
                    approx_position: pos,
                    advert_time: now,
                    route: Some(vec![me]),
                    stability: 1.0,
                },
            );
        }
        let rect = self.rect_of(g.prefix);
        self.lar_send(k, me, rect, payload, Vec::new());
        k.schedule_in(Ev::AdvTick(me, g), self.p.adv_period);
    }

    pub(super) fn data_tick(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let Some(s) = self.nodes[me.index()].senders.get_mut(&g) else {
            return;
        };
        if s.data_left == 0 {
            return;
        }
        s.data_left -= 1;
        let seq = s.data_seq;
        s.data_seq += 1;
        let (interval, size, more) = (s.data_interval, s.size, s.data_left > 0);
        k.record(Some(me), "data_send", json!({"group": g, "seq": seq}));
        let e = self.entry(me, g);
        e.first_sight(me, seq);
        let targets = e.forward_targets(None);
        let payload = Payload::Data {
            group: g,
            src: me,
            seq,
            hops: 0,
            size,
        };
        for t in targets {
            let pkt = self.packet(me, self.p.max_hops, Routing::Mesh, payload.clone());
            self.unicast(k, me, t, pkt);
        }
        if more {
            k.schedule_in(Ev::DataTick(me, g), interval);
        }
    }

    pub(super) fn on_mesh_packet(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>, _s: f64) {
        let Payload::Data {
            group,
            src,
            seq,
            hops,
            size,
        } = pkt.payload
        else {
            return;
        };
        let now = k.now();
        let Some(e) = self.nodes[me.index()].mesh.get_mut(&group) else {
            return;
        };
        if !e.first_sight(src, seq) {
            return;
        }
        e.last_data = now;
        if e.is_parent(from) && !e.sender {
            e.depth = hops + 1;
        }
        let deliver = e.receiver && e.joined();
        let targets = e.forward_targets(Some(from));
        if deliver {
            k.record(
                Some(me),
                "data_deliver",
                json!({"group": group, "src": src.0, "seq": seq, "hops": hops + 1}),
            );
        }
        let payload = Payload::Data {
            group,
            src,
            seq,
            hops: hops + 1,
            size,
        };
        for t in targets {
            let mut copy = (**pkt).clone();
            copy.payload = payload.clone();
            self.unicast(k, me, t, copy);
        }
    }

    /// Adv flood receipt. Returns whether to relay.
    pub(super) fn on_adv(&mut self, k: &mut Kernel<Ev>, me: NodeId, _from: NodeId, pkt: &Rc<Packet>, s: f64) -> bool {
        let Payload::Adv {
            group,
            sender,
            seq,
            sender_pos,
            ..
        } = pkt.payload
        else {
            return false;
        };
        if sender == me {
            return false;
        }
        let now = k.now();
        let route = pkt.reverse_route(me);
        let node = &mut self.nodes[me.index()];
        let cache = node.adv_cache.entry(group).or_default();
        let better = match cache.get(&sender) {
            Some(c) => seq > c.seq || (seq == c.seq && (s > c.stability || (s == c.stability && route.len() < c.route.len()))),
            None => true,
        };
        if better && route.last() == Some(&sender) {
            cache.insert(
                sender,
                AdvSeen {
                    route: route.clone(),
                    stability: s,
                    seq,
                    at: now,
                },
            );
        }
        if node.is_sds_for(group) {
            node.records.entry(group).or_insert_with(|| SdsRecord::new(group)).upsert(
                sender,
                SenderEntry {
                    approx_position: sender_pos,
                    advert_time: now,
                    route: Some(route),
                    stability: s,
                },
            );
        }
        true
    }

    /// An Adv that travelled to the rendezvous region.
    pub(super) fn on_adv_at_rr(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>, s: f64) {
        let Payload::Adv {
            group,
            sender,
            sender_pos,
            ..
        } = pkt.payload
        else {
            return;
        };
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        if node.sds_prefix != Some(group.prefix) || sender == me {
            return;
        }
        let route = pkt.reverse_route(me);
        let route = (route.last() == Some(&sender)).then_some(route);
        node.records.entry(group).or_insert_with(|| SdsRecord::new(group)).upsert(
            sender,
            SenderEntry {
                approx_position: sender_pos,
                advert_time: now,
                route,
                stability: s,
            },
        );
    }

    // ---- joins ----

    pub(super) fn start_join(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, purpose: JoinPurpose) {
        if !self.open_join(k, me, g, purpose) {
            return;
        }
        if purpose == JoinPurpose::Member {
            self.trace_mesh_distance(k, me, g);
        }
        self.run_stage(k, me, g, 0);
    }

    /// Creates the join state; false if already joined or joining.
    fn open_join(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, purpose: JoinPurpose) -> bool {
        if purpose == JoinPurpose::Member {
            let e = self.entry(me, g);
            e.receiver = true;
            if e.joined() {
                return false;
            }
        }
        if self.nodes[me.index()].joins.contains_key(&g) {
            return false;
        }
        let node = &mut self.nodes[me.index()];
        node.join_ids += 1;
        let jid = node.join_ids;
        node.joins.insert(
            g,
            JoinState {
                purpose,
                jid,
                qid: 0,
                stage: 0,
                started: k.now(),
                attempt: 0,
                cands: Vec::new(),
                unrouted: BTreeSet::new(),
                waiting_routes: false,
                reply_hops: 0,
                reply_stage: 0,
            },
        );
        true
    }

    /// Ground-truth hop distance from `me` to the closest node already on the mesh.
    fn trace_mesh_distance(&self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let serves = |n: NodeId| {
            self.nodes[n.index()]
                .mesh
                .get(&g)
                .is_some_and(|e| e.serves_other_than(me) || (e.receiver && e.joined() && n != me))
        };
        let any = self.nodes.iter().any(|n| n.alive && serves(n.id));
        if !any {
            return;
        }
        let mut dist: BTreeMap<NodeId, u32> = BTreeMap::new();
        dist.insert(me, 0);
        let mut q = VecDeque::from([me]);
        let mut found = None;
        while let Some(u) = q.pop_front() {
            let d = dist[&u];
            if u != me && serves(u) {
                found = Some(d);
                break;
            }
            if d >= MESH_DISTANCE_LIMIT {
                continue;
            }
            for v in k.neighbors(u).unwrap_or_default() {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(d + 1);
                    q.push_back(v);
                }
            }
        }
        if let Some(h) = found {
            k.record(Some(me), "mesh_distance", json!({"group": g, "hops": h}));
        }
    }

    fn run_stage(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, stage: u8) {
        let Some(js) = self.nodes[me.index()].joins.get(&g) else {
            return;
        };
        let jid = js.jid;
        let purpose = js.purpose;
        if stage > 4 {
            self.join_exhausted(k, me, g);
            return;
        }
        let qid = self.next_qid(me);
        if let Some(js) = self.nodes[me.index()].joins.get_mut(&g) {
            js.stage = stage;
            js.qid = qid;
        }
        let query = |stage: u8, depth: u8| Payload::JoinQuery {
            joiner: me,
            qid,
            group: g,
            stage,
            contact_depth: depth,
            sync: false,
        };
        match stage {
            0 => {
                self.trace_stage(k, me, g, jid, 0, "attempt", 0);
                let mut cands = Vec::new();
                if purpose == JoinPurpose::Member {
                    cands = self.local_candidates(k, me, g);
                }
                if self.nodes[me.index()].is_sds_for(g) && purpose == JoinPurpose::Bootstrap {
                    let n = self.nodes[me.index()].sessions.len();
                    let t = k.now().saturating_sub(self.nodes[me.index()].joins[&g].started).as_secs();
                    self.trace_stage(k, me, g, jid, 0, "success", 0);
                    self.nodes[me.index()].joins.remove(&g);
                    k.record(Some(me), "bootstrap_result", json!({"sessions": n, "stage": 0, "latency_s": t}));
                    return;
                }
                if cands.is_empty() {
                    self.trace_stage(k, me, g, jid, 0, "fail", 0);
                    self.run_stage(k, me, g, 1);
                } else {
                    self.trace_stage(k, me, g, jid, 0, "success", 0);
                    if let Some(js) = self.nodes[me.index()].joins.get_mut(&g) {
                        js.cands = cands;
                        js.reply_hops = 0;
                        js.reply_stage = 0;
                    }
                    self.finalize_join(k, me, g);
                }
            }
            1 => {
                let sds = self.zone_members_where(me, |l| l.sds_prefix == Some(g.prefix) || l.local_sds_groups.contains(&g));
                let route = sds.iter().find_map(|&(m, _)| self.zone_route(me, m));
                match route {
                    Some(route) => {
                        self.trace_stage(k, me, g, jid, 1, "attempt", 0);
                        self.send_source(k, me, route, query(1, TERMINAL));
                        k.schedule_in(Ev::StageTimeout(me, g, qid), self.p.stage_timeout);
                    }
                    None => {
                        self.trace_stage(k, me, g, jid, 1, "skip", 0);
                        self.run_stage(k, me, g, 2);
                    }
                }
            }
            2 => {
                let routes: Vec<Vec<NodeId>> =
                    self.nodes[me.index()].contacts.values().map(|c| c.route.clone()).collect();
                if routes.is_empty() {
                    self.trace_stage(k, me, g, jid, 2, "skip", 0);
                    self.run_stage(k, me, g, 3);
                    return;
                }
                self.trace_stage(k, me, g, jid, 2, "attempt", 0);
                for r in routes {
                    self.send_source(k, me, r, query(2, 1));
                }
                k.schedule_in(Ev::StageTimeout(me, g, qid), self.p.stage_timeout);
            }
            3 => {
                self.trace_stage(k, me, g, jid, 3, "attempt", 0);
                let pkt = self.packet(me, self.p.radius, Routing::Broadcast, query(3, TERMINAL));
                self.nodes[me.index()].seen_floods.insert(pkt.uid);
                self.broadcast(k, me, pkt);
                k.schedule_in(Ev::StageTimeout(me, g, qid), self.p.stage_timeout);
            }
            _ => {
                self.trace_stage(k, me, g, jid, 4, "attempt", 0);
                let rect = self.rect_of(g.prefix);
                self.lar_send(k, me, rect, query(4, TERMINAL), Vec::new());
                k.schedule_in(Ev::StageTimeout(me, g, qid), self.p.rr_timeout);
            }
        }
    }

    /// Stage 0: fresh Adv routes, or grafting onto mesh state already held here.
    fn local_candidates(&self, k: &Kernel<Ev>, me: NodeId, g: GroupAddress) -> Vec<Candidate> {
        let now = k.now();
        let node = &self.nodes[me.index()];
        let mut out = Vec::new();
        if let Some(e) = node.mesh.get(&g) {
            if let Some((_, next)) = e.primary_upstream(me).filter(|_| e.serves_other_than(me)) {
                out.push(Candidate {
                    route: vec![me, next],
                    stability: self.link_stability(me, next),
                    source: CandidateSource::Graft,
                });
            }
        }
        if let Some(cache) = node.adv_cache.get(&g) {
            for a in cache.values() {
                if now.saturating_sub(a.at) <= self.p.member_expiry && a.route.first() == Some(&me) {
                    out.push(Candidate {
                        route: a.route.clone(),
                        stability: a.stability,
                        source: CandidateSource::Adv,
                    });
                }
            }
        }
        out
    }

    pub(super) fn stage_timeout(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, qid: u32) {
        let Some(js) = self.nodes[me.index()].joins.get(&g) else {
            return;
        };
        if js.qid != qid || js.waiting_routes {
            return;
        }
        let (jid, stage) = (js.jid, js.stage);
        self.trace_stage(k, me, g, jid, stage, "fail", 0);
        self.run_stage(k, me, g, stage + 1);
    }

    fn join_exhausted(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let base = self.p.scenario.mcast.join_retry_s;
        let cap = self.p.scenario.mcast.join_retry_max_s;
        let Some(js) = self.nodes[me.index()].joins.get_mut(&g) else {
            return;
        };
        let delay = (base * 2f64.powi(js.attempt as i32)).min(cap);
        js.attempt += 1;
        js.qid = 0;
        js.cands.clear();
        js.unrouted.clear();
        let jid = js.jid;
        k.record(
            Some(me),
            "join_result",
            json!({"group": g, "join": jid, "outcome": "retry", "retry_in_s": delay}),
        );
        k.schedule_in(Ev::JoinRetry(me, g), SimTime::from_secs(delay));
    }

    pub(super) fn join_retry(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let Some(js) = self.nodes[me.index()].joins.get_mut(&g) else {
            return;
        };
        if js.qid != 0 {
            return;
        }
        let node = &mut self.nodes[me.index()];
        node.join_ids += 1;
        let jid = node.join_ids;
        if let Some(js) = node.joins.get_mut(&g) {
            js.jid = jid;
        }
        self.run_stage(k, me, g, 0);
    }

    /// Join query at a potential responder. Returns whether a flood should be relayed.
    pub(super) fn on_join_query(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) -> bool {
        let Payload::JoinQuery {
            joiner,
            qid,
            group,
            stage,
            contact_depth,
            sync,
        } = pkt.payload
        else {
            return false;
        };
        if joiner == me {
            return false;
        }
        let now = k.now();
        self.nodes[me.index()].activity.observe(now);
        if !sync {
            self.observe_popularity(k, me, group);
        }
        let node = &self.nodes[me.index()];
        let is_sds = if sync {
            node.sds_prefix == Some(group.prefix)
        } else {
            node.is_sds_for(group)
        };
        let on_mesh = node.mesh.get(&group).is_some_and(|e| e.serves_other_than(joiner));
        if is_sds || (on_mesh && !sync && group != GroupAddress::SESSION_DIRECTORY) {
            self.answer_join_query(k, me, pkt, qid, group, stage, is_sds, on_mesh);
            return false;
        }
        if stage == 2 && contact_depth != TERMINAL {
            // A contact (or contact of a contact) consults its own zone first.
            let servers = self.zone_members_where(me, |l| {
                l.sds_prefix == Some(group.prefix)
                    || l.local_sds_groups.contains(&group)
                    || l.mesh.iter().any(|m| m.group == group)
            });
            let mut record = pkt.path_record.clone();
            record.retain(|&n| n != me);
            for (m, _) in servers {
                if m == joiner {
                    continue;
                }
                if let Some(route) = self.zone_route(me, m) {
                    let mut q = pkt.payload.clone();
                    if let Payload::JoinQuery { contact_depth, .. } = &mut q {
                        *contact_depth = TERMINAL;
                    }
                    if self.send_source_with(k, me, route, q, record.clone()) {
                        return false;
                    }
                }
            }
            if contact_depth > 0 {
                let routes: Vec<Vec<NodeId>> = self.nodes[me.index()]
                    .contacts
                    .values()
                    .filter(|c| !pkt.path_record.contains(&c.contact))
                    .map(|c| c.route.clone())
                    .collect();
                for r in routes {
                    let mut q = pkt.payload.clone();
                    if let Payload::JoinQuery { contact_depth, .. } = &mut q {
                        *contact_depth -= 1;
                    }
                    self.send_source_with(k, me, r, q, record.clone());
                }
            }
            return false;
        }
        stage == 3
    }

    #[allow(clippy::too_many_arguments)]
    fn answer_join_query(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        pkt: &Rc<Packet>,
        qid: u32,
        group: GroupAddress,
        stage: u8,
        is_sds: bool,
        on_mesh: bool,
    ) {
        let now = k.now();
        let member_expiry = self.p.member_expiry;
        let node = &mut self.nodes[me.index()];
        let mut senders: Vec<SenderInfo> = Vec::new();
        if let Some(rec) = node.records.get_mut(&group) {
            rec.queries_answered += 1;
            for (s, e) in &rec.senders {
                let route = e.route.clone().filter(|r| r.first() == Some(&me) && r.last() == Some(s));
                senders.push(SenderInfo {
                    sender: *s,
                    position: e.approx_position,
                    route,
                    stability: e.stability,
                });
            }
        }
        if let Some(cache) = node.adv_cache.get(&group) {
            for (s, a) in cache {
                if now.saturating_sub(a.at) <= member_expiry && !senders.iter().any(|x| x.sender == *s && x.route.is_some()) {
                    senders.retain(|x| x.sender != *s);
                    senders.push(SenderInfo {
                        sender: *s,
                        position: node.reported_pos,
                        route: Some(a.route.clone()),
                        stability: a.stability,
                    });
                }
            }
        }
        if node.mesh.get(&group).is_some_and(|e| e.sender) {
            senders.retain(|x| x.sender != me);
            senders.push(SenderInfo {
                sender: me,
                position: node.reported_pos,
                route: Some(vec![me]),
                stability: 1.0,
            });
        }
        let sessions = if group == GroupAddress::SESSION_DIRECTORY {
            node.sessions.all().cloned().collect()
        } else {
            Vec::new()
        };
        let reply = Payload::JoinReply {
            qid,
            group,
            stage,
            responder: me,
            authoritative: is_sds,
            senders,
            attach: on_mesh.then(|| vec![me]),
            sessions,
        };
        k.record(
            Some(me),
            "join_answer",
            json!({"group": group, "stage": stage, "sds": is_sds, "mesh": on_mesh}),
        );
        self.reply_along(k, me, pkt, reply);
    }

    pub(super) fn on_join_reply(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>, s: f64) {
        let Payload::JoinReply {
            qid,
            group,
            stage,
            responder,
            authoritative,
            ref senders,
            ref attach,
            ref sessions,
        } = pkt.payload
        else {
            return;
        };
        let now = k.now();
        let hops = pkt.path_record.len() as u32;
        let Routing::Source { route, .. } = &pkt.routing else {
            return;
        };
        let to_responder: Vec<NodeId> = route.iter().rev().copied().collect();
        let node = &mut self.nodes[me.index()];
        // Sync reply at a local server.
        if node.local_sds.contains(&group) && !node.joins.get(&group).is_some_and(|j| j.qid == qid) {
            let rec = node.records.entry(group).or_insert_with(|| SdsRecord::new(group));
            for si in senders {
                rec.upsert(
                    si.sender,
                    SenderEntry {
                        approx_position: si.position,
                        advert_time: now,
                        route: None,
                        stability: si.stability,
                    },
                );
            }
            return;
        }
        let Some(js) = node.joins.get_mut(&group) else {
            return;
        };
        if js.qid != qid || js.waiting_routes {
            return;
        }
        let jid = js.jid;
        if js.purpose == JoinPurpose::Bootstrap {
            if !authoritative {
                return;
            }
            let n = sessions.len();
            let t = now.saturating_sub(js.started).as_secs();
            node.joins.remove(&group);
            for sinfo in sessions {
                if node.sessions.get(&sinfo.addr).is_none() && node.sds_prefix == Some(0) {
                    node.sessions.insert(sinfo.clone());
                }
            }
            self.trace_stage(k, me, group, jid, stage, "success", hops);
            k.record(
                Some(me),
                "bootstrap_result",
                json!({"sessions": n, "stage": stage, "hops": hops, "latency_s": t}),
            );
            return;
        }
        let floor = self.p.scenario.mcast.stability_floor;
        let mut cands = Vec::new();
        let mut unrouted = BTreeSet::new();
        if let Some(a) = attach {
            let mut r = to_responder.clone();
            r.extend(a.iter().skip(1));
            cands.push(Candidate {
                route: simple_path(r),
                stability: s,
                source: CandidateSource::Graft,
            });
        }
        for si in senders {
            if si.sender == me {
                continue;
            }
            match &si.route {
                Some(r) if si.stability >= floor && r.first() == Some(&responder) => {
                    let mut full = to_responder.clone();
                    full.extend(r.iter().skip(1));
                    let full = simple_path(full);
                    if full.last() == Some(&si.sender) {
                        cands.push(Candidate {
                            route: full,
                            stability: s.min(si.stability),
                            source: CandidateSource::ServerRoute,
                        });
                        continue;
                    }
                    unrouted.insert(si.sender);
                }
                _ => {
                    unrouted.insert(si.sender);
                }
            }
        }
        if cands.is_empty() && unrouted.is_empty() {
            // Definitive "no sender yet": nothing further to discover now.
            if authoritative {
                self.trace_stage(k, me, group, jid, stage, "empty", hops);
                self.join_exhausted(k, me, group);
            }
            return;
        }
        self.trace_stage(k, me, group, jid, stage, "success", hops);
        let has_direct = cands.iter().any(|c| matches!(c.source, CandidateSource::Graft | CandidateSource::Adv));
        let js = self.nodes[me.index()].joins.get_mut(&group).expect("join state");
        js.cands = cands;
        js.unrouted = unrouted.clone();
        js.reply_hops = hops;
        js.reply_stage = stage;
        if has_direct || unrouted.is_empty() || self.p.scenario.mcast.route_query_rounds == 0 {
            self.finalize_join(k, me, group);
            return;
        }
        js.waiting_routes = true;
        let rounds = self.p.scenario.mcast.route_query_rounds;
        let wait_qid = js.qid;
        for t in unrouted {
            let q = self.next_qid(me);
            self.bordercast_from(k, me, q, QueryTarget::Node(t), QueryPurpose::JoinRoute(group), rounds);
        }
        if self.nodes[me.index()].joins.get(&group).is_some_and(|j| j.waiting_routes) {
            k.schedule_in(
                Ev::RouteWaitDone(me, group, wait_qid),
                SimTime::from_secs(ROUTE_ROUND_WAIT_S * rounds as f64),
            );
        }
    }

    pub(super) fn join_route_reply(&mut self, _k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, target: NodeId, path: Vec<NodeId>) {
        if path.len() < 2 || path.first() != Some(&me) || path.last() != Some(&target) {
            return;
        }
        let s = self.link_stability(me, path[1]);
        let Some(js) = self.nodes[me.index()].joins.get_mut(&g) else {
            return;
        };
        if !js.waiting_routes {
            return;
        }
        js.cands.push(Candidate {
            route: path,
            stability: s,
            source: CandidateSource::Discovered,
        });
    }

    pub(super) fn route_wait_done(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, qid: u32) {
        let Some(js) = self.nodes[me.index()].joins.get_mut(&g) else {
            return;
        };
        if js.qid != qid || !js.waiting_routes {
            return;
        }
        js.waiting_routes = false;
        self.finalize_join(k, me, g);
    }

    /// Ranks the collected candidates and installs one active and the rest standby.
    fn finalize_join(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let now = k.now();
        let max_paths = self.p.scenario.mcast.max_paths;
        let node = &self.nodes[me.index()];
        let Some(js) = node.joins.get(&g) else {
            return;
        };
        let usable: Vec<Candidate> = js
            .cands
            .iter()
            .filter(|c| c.route.len() >= 2 && node.neighbors.contains_key(&c.route[1]))
            .cloned()
            .collect();
        let mut ranked = rank_candidates(usable, max_paths);
        // Drop whatever older paths remain.
        if !ranked.is_empty() {
            let old: Vec<UpstreamPath> = std::mem::take(&mut self.entry(me, g).upstream_paths);
            for p in old.iter().filter(|p| p.active) {
                self.prune_own(k, me, g, p.seq);
            }
        }
        while !ranked.is_empty() {
            let c = ranked.remove(0);
            let seq = self.bump_join_seq(me);
            if !self.send_activation(k, me, g, c.route.clone(), seq) {
                continue;
            }
            let js = self.nodes[me.index()].joins.remove(&g).expect("join state");
            k.record(
                Some(me),
                "join_result",
                json!({
                    "group": g, "join": js.jid, "outcome": "joined", "stage": js.reply_stage,
                    "name": STAGE_NAMES[js.reply_stage as usize], "hops": js.reply_hops,
                    "latency_s": now.saturating_sub(js.started).as_secs(),
                    "source": c.source.as_str(), "paths": ranked.len() + 1,
                    "path_hops": c.route.len() - 1,
                }),
            );
            self.entry(me, g).upstream_paths.push(UpstreamPath {
                route: c.route,
                stability: c.stability,
                active: true,
                seq,
            });
            for c in ranked {
                let seq = self.bump_join_seq(me);
                self.send_standby(k, me, g, c.route.clone(), seq);
                self.entry(me, g).upstream_paths.push(UpstreamPath {
                    route: c.route,
                    stability: c.stability,
                    active: false,
                    seq,
                });
            }
            return;
        }
        let Some(js) = self.nodes[me.index()].joins.get_mut(&g) else { return };
        let (stage, jid, hops) = (js.reply_stage, js.jid, js.reply_hops);
        // A server knew senders but no usable path to them: keep searching.
        js.cands.clear();
        js.unrouted.clear();
        self.trace_stage(k, me, g, jid, stage, "no_route", hops);
        self.run_stage(k, me, g, stage + 1);
    }

    fn bump_join_seq(&mut self, me: NodeId) -> u32 {
        let n = &mut self.nodes[me.index()];
        n.join_seq += 1;
        n.join_seq
    }

    /// Sends the activating JoinRequest for `(me, seq)`; false if the first hop is gone.
    fn send_activation(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, route: Vec<NodeId>, seq: u32) -> bool {
        let key = (me, seq);
        self.entry(me, g).parent_of.insert(key, route[1]);
        let payload = Payload::JoinRequest {
            group: g,
            keys: vec![key],
            active: true,
            follow: None,
        };
        let ok = self.send_source(k, me, route, payload);
        if !ok {
            self.entry(me, g).parent_of.remove(&key);
        }
        ok
    }

    fn send_standby(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, route: Vec<NodeId>, _seq: u32) {
        let payload = Payload::JoinRequest {
            group: g,
            keys: Vec::new(),
            active: false,
            follow: None,
        };
        self.send_source(k, me, route, payload);
    }

    /// Prunes the receiver's own key `(me, seq)` toward its parent.
    fn prune_own(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, seq: u32) {
        let key = (me, seq);
        if let Some(p) = self.entry(me, g).parent_of.remove(&key) {
            self.send_source(k, me, vec![me, p], Payload::Prune { group: g, key });
        }
    }

    pub(super) fn on_join_request(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>) {
        let (
            Routing::Source { route, pos },
            Payload::JoinRequest {
                group,
                keys,
                active,
                follow,
            },
        ) = (&pkt.routing, &pkt.payload)
        else {
            return;
        };
        let (g, active) = (*group, *active);
        let now = k.now();
        let last = *pos + 1 == route.len();
        {
            let e = self.entry(me, g);
            if active {
                for &key in keys {
                    if e.add_member(from, key, now) == BranchChange::Activated {
                        k.record(Some(me), "branch_activate", json!({"group": g, "child": from.0}));
                    }
                }
            } else {
                e.add_standby(from, now);
            }
        }
        if !active {
            if !last {
                self.forward_source(k, me, pkt, pkt.stability);
            }
            return;
        }
        let is_sender = self.nodes[me.index()].mesh[&g].sender;
        if last && is_sender {
            return;
        }
        let (next, follow) = if !last {
            (route[pos + 1], *follow)
        } else {
            let e = &self.nodes[me.index()].mesh[&g];
            let chosen = follow
                .and_then(|f| {
                    let own_or_fresh = keys.iter().all(|k| k.0 != f.0 || k.1 != f.1);
                    e.parent_of.get(&f).filter(|_| own_or_fresh).map(|n| (f, *n))
                })
                .or_else(|| {
                    e.parent_of
                        .iter()
                        .find(|(k, _)| !keys.contains(k))
                        .map(|(k, n)| (*k, *n))
                        .and_then(|first| e.primary_upstream(me).filter(|(k, _)| !keys.contains(k)).or(Some(first)))
                });
            match chosen {
                Some((fk, n)) => (n, Some(fk)),
                None => {
                    self.fail_keys_down(k, me, g, from, keys);
                    return;
                }
            }
        };
        if next == from || pkt.path_record.contains(&next) {
            self.fail_keys_down(k, me, g, from, keys);
            return;
        }
        for &key in keys {
            self.entry(me, g).parent_of.insert(key, next);
        }
        let ok = if !last {
            self.forward_source(k, me, pkt, pkt.stability)
        } else {
            let payload = Payload::JoinRequest {
                group: g,
                keys: keys.clone(),
                active: true,
                follow,
            };
            self.send_source_with(k, me, vec![me, next], payload, pkt.path_record.clone())
        };
        if !ok {
            for key in keys {
                self.entry(me, g).parent_of.remove(key);
            }
            self.fail_keys_down(k, me, g, from, keys);
        }
    }

    /// Removes `keys` from the branch toward `child` and tells it the path is gone.
    fn fail_keys_down(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, child: NodeId, keys: &[MemberKey]) {
        for &key in keys {
            self.remove_member_traced(k, me, g, child, key);
        }
        if child != me {
            let payload = Payload::JoinFail {
                group: g,
                keys: keys.to_vec(),
            };
            self.send_source(k, me, vec![me, child], payload);
        }
    }

    fn remove_member_traced(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, child: NodeId, key: MemberKey) {
        if self.entry(me, g).remove_member(child, key) == BranchChange::Deactivated {
            k.record(Some(me), "branch_deactivate", json!({"group": g, "child": child.0}));
        }
    }

    pub(super) fn on_join_fail(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>) {
        let Payload::JoinFail { group, ref keys } = pkt.payload else {
            return;
        };
        for &key in keys {
            let e = self.entry(me, group);
            if e.parent_of.get(&key) == Some(&from) {
                e.parent_of.remove(&key);
            } else if key.0 != me {
                continue;
            }
            if key.0 == me {
                self.path_failed(k, me, group, key.1);
                continue;
            }
            if let Some(child) = self.entry(me, group).branch_of(key) {
                self.fail_keys_down(k, me, group, child, &[key]);
            }
        }
    }

    pub(super) fn on_prune(&mut self, k: &mut Kernel<Ev>, me: NodeId, from: NodeId, pkt: &Rc<Packet>) {
        let Payload::Prune { group, key } = pkt.payload else {
            return;
        };
        let Some(e) = self.nodes[me.index()].mesh.get(&group) else {
            return;
        };
        if e.downstream.get(&from).is_none_or(|b| b.members.get(&key.0) != Some(&key.1)) {
            return;
        }
        self.remove_member_traced(k, me, group, from, key);
        if let Some(p) = self.entry(me, group).parent_of.remove(&key) {
            self.send_source(k, me, vec![me, p], Payload::Prune { group, key });
        }
    }

    /// The receiver's path with join sequence `seq` broke.
    fn path_failed(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, seq: u32) {
        let e = self.entry(me, g);
        let Some(i) = e.upstream_paths.iter().position(|p| p.seq == seq) else {
            return;
        };
        let was_active = e.upstream_paths[i].active;
        let dead = e.upstream_paths.remove(i).route;
        e.parent_of.remove(&(me, seq));
        // A cached advert route that just failed would be picked again at once.
        if let Some(cache) = self.nodes[me.index()].adv_cache.get_mut(&g) {
            cache.retain(|_, a| a.route != dead);
        }
        let e = self.entry(me, g);
        if !was_active || !e.receiver {
            return;
        }
        let standby = e.upstream_paths.iter().position(|p| !p.active);
        match standby {
            Some(j) => {
                let seq = self.bump_join_seq(me);
                let e = self.entry(me, g);
                e.upstream_paths[j].active = true;
                e.upstream_paths[j].seq = seq;
                let route = e.upstream_paths[j].route.clone();
                k.record(Some(me), "path_failover", json!({"group": g, "hops": route.len() - 1}));
                if !self.send_activation(k, me, g, route, seq) {
                    self.path_failed(k, me, g, seq);
                }
            }
            None => {
                k.record(Some(me), "path_lost", json!({"group": g}));
                self.entry(me, g).upstream_paths.clear();
                // Rejoin from a fresh event, after the broken link has been processed.
                if self.open_join(k, me, g, JoinPurpose::Member) {
                    k.schedule_in(Ev::JoinRetry(me, g), self.p.stage_timeout);
                }
            }
        }
    }

    pub(super) fn leave(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        self.nodes[me.index()].joins.remove(&g);
        let Some(e) = self.nodes[me.index()].mesh.get_mut(&g) else {
            return;
        };
        e.receiver = false;
        let paths = std::mem::take(&mut e.upstream_paths);
        for p in paths.iter().filter(|p| p.active) {
            self.prune_own(k, me, g, p.seq);
        }
    }

    // ---- mesh upkeep ----

    pub(super) fn mesh_neighbor_lost(&mut self, k: &mut Kernel<Ev>, me: NodeId, lost: NodeId) {
        let groups: Vec<GroupAddress> = self.nodes[me.index()].mesh.keys().copied().collect();
        for g in groups {
            // Downstream branch through the lost neighbor.
            if let Some(b) = self.entry(me, g).downstream.remove(&lost) {
                if b.active {
                    k.record(Some(me), "branch_deactivate", json!({"group": g, "child": lost.0}));
                }
                for (r, s) in b.members {
                    let key = (r, s);
                    if let Some(p) = self.entry(me, g).parent_of.remove(&key) {
                        if p != lost {
                            self.send_source(k, me, vec![me, p], Payload::Prune { group: g, key });
                        }
                    }
                }
            }
            // Standby paths through the lost neighbor.
            self.entry(me, g)
                .upstream_paths
                .retain(|p| p.active || p.route.get(1) != Some(&lost));
            // Keys whose parent was lost: local repair or failure.
            let keys = self.entry(me, g).keys_via_parent(lost);
            for key in keys {
                if !self.local_repair(k, me, g, key, lost) {
                    self.entry(me, g).parent_of.remove(&key);
                    if key.0 == me {
                        self.path_failed(k, me, g, key.1);
                    } else if let Some(child) = self.entry(me, g).branch_of(key) {
                        self.fail_keys_down(k, me, g, child, &[key]);
                    }
                }
            }
        }
    }

    /// Reattaches `key` through a zone member that is closer to the sender.
    fn local_repair(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress, key: MemberKey, lost: NodeId) -> bool {
        let depth = self.nodes[me.index()].mesh[&g].depth;
        let children: BTreeSet<NodeId> = self.nodes[me.index()].mesh[&g].downstream.keys().copied().collect();
        let cands = self.zone_members_where(me, |l| l.mesh.iter().any(|m| m.group == g && m.depth < depth));
        for (m, _) in cands {
            if m == lost || children.contains(&m) || m == key.0 {
                continue;
            }
            let Some(route) = self.zone_route(me, m) else { continue };
            if route.contains(&lost) || route.iter().skip(1).any(|n| children.contains(n)) {
                continue;
            }
            self.entry(me, g).parent_of.insert(key, route[1]);
            let payload = Payload::JoinRequest {
                group: g,
                keys: vec![key],
                active: true,
                follow: None,
            };
            if self.send_source(k, me, route.clone(), payload) {
                k.record(
                    Some(me),
                    "local_repair",
                    json!({"group": g, "receiver": key.0 .0, "hops": route.len() - 1}),
                );
                if key.0 == me {
                    if let Some(p) = self.entry(me, g).upstream_paths.iter_mut().find(|p| p.seq == key.1) {
                        p.route = route;
                    }
                }
                return true;
            }
        }
        false
    }

    /// Make-before-break switch to a neighbor closer to the source.
    pub(super) fn handoff_check(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let now = k.now();
        let th = self.p.scenario.mcast.handoff_metric_th;
        let cooldown = self.p.hold + self.p.hello;
        let groups: Vec<GroupAddress> = self.nodes[me.index()]
            .mesh
            .iter()
            .filter(|(g, e)| e.joined() && !e.sender && !self.nodes[me.index()].joins.contains_key(g))
            .map(|(g, _)| *g)
            .collect();
        for g in groups {
            let node = &self.nodes[me.index()];
            if node.last_handoff.get(&g).is_some_and(|t| now.saturating_sub(*t) < cooldown) {
                continue;
            }
            let e = &node.mesh[&g];
            let Some(ap) = e.active_path() else { continue };
            let seq = ap.seq;
            let Some(&parent) = e.parent_of.get(&(me, seq)) else { continue };
            if e.depth == u32::MAX {
                continue;
            }
            let separating = node
                .links
                .get(&parent)
                .is_some_and(|h| h.has_samples() && h.latest_metric() < th);
            let mut best: Option<(u32, NodeId)> = None;
            for n in node.neighbors.keys() {
                if *n == parent || e.downstream.contains_key(n) {
                    continue;
                }
                let Some(d) = node
                    .lsdb
                    .get(*n)
                    .and_then(|l| l.mesh.iter().find(|m| m.group == g).map(|m| m.depth))
                else {
                    continue;
                };
                if d == u32::MAX {
                    continue;
                }
                let better = d + 1 < e.depth || (separating && d < e.depth);
                if better && best.is_none_or(|b| (d, *n) < b) {
                    best = Some((d, *n));
                }
            }
            let Some((d, n)) = best else { continue };
            let reason = if d + 1 < e.depth { "closer" } else { "separating" };
            let new_seq = self.bump_join_seq(me);
            let stab = self.link_stability(me, n);
            let node = &mut self.nodes[me.index()];
            node.last_handoff.insert(g, now);
            let e = node.mesh.get_mut(&g).expect("entry");
            for p in e.upstream_paths.iter_mut() {
                p.active = false;
            }
            e.upstream_paths.insert(
                0,
                UpstreamPath {
                    route: vec![me, n],
                    stability: stab,
                    active: true,
                    seq: new_seq,
                },
            );
            e.upstream_paths.truncate(self.p.scenario.mcast.max_paths);
            k.record(
                Some(me),
                "handoff",
                json!({"group": g, "from": parent.0, "to": n.0, "reason": reason, "depth": d + 1}),
            );
            if self.send_activation(k, me, g, vec![me, n], new_seq) {
                self.prune_own(k, me, g, seq);
            } else {
                self.path_failed(k, me, g, new_seq);
            }
        }
    }

    pub(super) fn mesh_expiry(&mut self, k: &mut Kernel<Ev>) {
        let now = k.now();
        let exp = self.p.member_expiry;
        for node in self.nodes.iter_mut().filter(|n| n.alive) {
            for e in node.mesh.values_mut() {
                e.downstream
                    .retain(|_, b| b.active || b.member_below() || now.saturating_sub(b.refreshed) <= exp);
            }
            node.mesh.retain(|_, e| !(e.is_idle() && e.upstream_paths.is_empty()));
            for cache in node.adv_cache.values_mut() {
                cache.retain(|_, a| now.saturating_sub(a.at) <= exp);
            }
            node.adv_cache.retain(|_, c| !c.is_empty());
            let window = SimTime::from_secs(3.0 * self.p.scenario.rr.advert_period_s);
            node.heard_sds.retain(|_, (_, t)| now.saturating_sub(*t) <= window);
        }
        k.schedule_in(Ev::MeshExpiry, self.p.adv_period);
    }

    // ---- popularity ----

    fn observe_popularity(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let mc = &self.p.scenario.mcast;
        if !mc.popularity_enabled || g == GroupAddress::SESSION_DIRECTORY {
            return;
        }
        let (th, cooldown, half) = (mc.pop_query_th, SimTime::from_secs(mc.pop_query_cooldown_s), mc.pop_half_life_s);
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        if !node.eligible || node.is_sds_for(g) || node.gq_scheduled.contains_key(&g) {
            return;
        }
        let pop = node.popularity.entry(g).or_insert_with(|| PopularityState::new(half));
        pop.observe(now);
        if pop.count_at(now) <= th || pop.last_query.is_some_and(|t| now.saturating_sub(t) < cooldown) {
            return;
        }
        let jitter: f64 = self.rng.random_range(0.0..0.5);
        let node = &mut self.nodes[me.index()];
        node.gq_scheduled.insert(g, now);
        k.schedule_in(Ev::GroupQueryStart(me, g), SimTime::from_secs(jitter));
    }

    pub(super) fn group_query_start(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        let Some(sched) = node.gq_scheduled.remove(&g) else { return };
        let cooldown = SimTime::from_secs(self.p.scenario.mcast.pop_query_cooldown_s);
        let pop = node.popularity.get_mut(&g).expect("popularity state");
        // Someone nearby queried in the meantime: reuse their cooldown.
        if pop.last_query.is_some_and(|t| t > sched || now.saturating_sub(t) < cooldown) {
            return;
        }
        pop.last_query = Some(now);
        let qid = self.next_qid(me);
        self.nodes[me.index()].group_queries.insert(
            qid,
            GroupQueryState {
                group: g,
                members: BTreeSet::new(),
                sds: BTreeSet::new(),
            },
        );
        k.record(Some(me), "group_query", json!({"group": g, "qid": qid}));
        let payload = Payload::GroupQuery { origin: me, qid, group: g };
        let pkt = self.packet(me, self.p.radius, Routing::Broadcast, payload.clone());
        self.nodes[me.index()].seen_floods.insert(pkt.uid);
        self.broadcast(k, me, pkt);
        let routes: Vec<Vec<NodeId>> = self.nodes[me.index()].contacts.values().map(|c| c.route.clone()).collect();
        for r in routes {
            self.send_source(k, me, r, payload.clone());
        }
        k.schedule_in(Ev::GroupQueryDone(me, qid), self.p.stage_timeout.mul(4));
    }

    pub(super) fn on_group_query(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) -> bool {
        let Payload::GroupQuery { origin, qid, group } = pkt.payload else {
            return false;
        };
        if origin == me {
            return false;
        }
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        if let Some(p) = node.popularity.get_mut(&group) {
            p.last_query = Some(now);
        }
        let member = node.mesh.get(&group).is_some_and(|e| e.receiver);
        let sds = node.is_sds_for(group);
        if member || sds {
            let payload = Payload::GroupQueryReply { qid, group, member, sds };
            self.reply_along(k, me, pkt, payload);
        }
        matches!(pkt.routing, Routing::Broadcast)
    }

    pub(super) fn on_group_query_reply(&mut self, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::GroupQueryReply { qid, member, sds, .. } = pkt.payload else {
            return;
        };
        if let Some(q) = self.nodes[me.index()].group_queries.get_mut(&qid) {
            if member {
                q.members.insert(pkt.src);
            }
            if sds {
                q.sds.insert(pkt.src);
            }
        }
    }

    pub(super) fn group_query_done(&mut self, k: &mut Kernel<Ev>, me: NodeId, qid: u32) {
        let Some(q) = self.nodes[me.index()].group_queries.remove(&qid) else {
            return;
        };
        let g = q.group;
        let mut sds = q.sds.clone();
        for (m, _) in self.zone_members_where(me, |l| l.local_sds_groups.contains(&g)) {
            sds.insert(m);
        }
        let grp = q.members.len() as u32 + u32::from(self.nodes[me.index()].mesh.get(&g).is_some_and(|e| e.receiver));
        let pop_th = self.p.scenario.mcast.pop_th;
        let node = &mut self.nodes[me.index()];
        let pop = node
            .popularity
            .entry(g)
            .or_insert_with(|| PopularityState::new(self.p.scenario.mcast.pop_half_life_s))
            .complete_query(grp, sds.len() as u32);
        k.record(
            Some(me),
            "pop_query",
            json!({"group": g, "grp_est": grp, "sds_est": sds.len().max(1), "pop_est": pop}),
        );
        if pop > pop_th && !node.is_sds_for(g) {
            node.local_sds.insert(g);
            node.records.entry(g).or_insert_with(|| SdsRecord::new(g));
            node.lsa_pending = true;
            k.record(Some(me), "pop_promote", json!({"group": g, "pop_est": pop}));
            k.schedule_in(Ev::LsaTrigger(me), self.p.lsa_delay);
            self.local_sync(k, me, g);
        }
    }

    /// A local server pulls the rendezvous region's record for its group.
    pub(super) fn local_sync(&mut self, k: &mut Kernel<Ev>, me: NodeId, g: GroupAddress) {
        if !self.nodes[me.index()].local_sds.contains(&g) {
            return;
        }
        let qid = self.next_qid(me);
        let payload = Payload::JoinQuery {
            joiner: me,
            qid,
            group: g,
            stage: 4,
            contact_depth: TERMINAL,
            sync: true,
        };
        let rect = self.rect_of(g.prefix);
        if self.nodes[me.index()].sds_prefix != Some(g.prefix) {
            self.lar_send(k, me, rect, payload, Vec::new());
        }
        let period = SimTime::from_secs(self.p.scenario.rr.local_sync_period_s);
        k.schedule_in(Ev::LocalSync(me, g), period);
    }
}
