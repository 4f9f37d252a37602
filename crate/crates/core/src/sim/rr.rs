//! Rendezvous regions: lollipop forwarding, geocast, SDS election and sessions.

use std::rc::Rc;

use rand::Rng;
use serde_json::json;

use super::{Ev, Registration, State};
use crate::geo::Rect;
use crate::kernel::Kernel;
use crate::packet::{Packet, Payload, Routing, SessionResult};
use crate::rendezvous::{
    closer_contact, expected_region_population, greedy_next_hop, promotion_probability, Assignment, GroupAddress,
    SdsRecord, SessionInfo,
};
use crate::time::SimTime;
use crate::NodeId;

impl State {
    // ---- lollipop forwarding ----

    /// Sends `payload` toward `rect`; `record` seeds the path record.
    pub(crate) fn lar_send(&mut self, k: &mut Kernel<Ev>, me: NodeId, rect: Rect, payload: Payload, record: Vec<NodeId>) {
        let mut pkt = self.packet(me, self.p.max_hops, Routing::Lar { rect, segment: None }, payload);
        pkt.path_record = record;
        self.lar_step(k, me, pkt, 1.0);
    }

    pub(super) fn lar_receive(&mut self, k: &mut Kernel<Ev>, me: NodeId, _from: NodeId, pkt: &Rc<Packet>, s: f64) {
        let mut copy = (**pkt).clone();
        if let Routing::Lar { segment, .. } = &mut copy.routing {
            if let Some((route, pos)) = segment {
                if route.get(*pos) != Some(&me) {
                    return;
                }
                if *pos + 1 >= route.len() {
                    *segment = None;
                }
            }
        }
        self.lar_step(k, me, copy, s);
    }

    /// One geographic forwarding decision at `me`.
    fn lar_step(&mut self, k: &mut Kernel<Ev>, me: NodeId, mut pkt: Packet, s: f64) {
        let Routing::Lar { rect, segment } = pkt.routing.clone() else {
            return;
        };
        pkt.stability = s;
        let here = self.nodes[me.index()].reported_pos;
        if rect.contains_closed(&here) {
            self.rr_arrive(k, me, pkt, rect, s);
            return;
        }
        if pkt.ttl_hops == 0 {
            self.drop_packet(k, me, pkt.kind, "max_hops");
            return;
        }
        let dist = rect.distance_to(&here);
        // Continue an intra-zone or contact segment.
        if let Some((route, pos)) = segment {
            let next = route[pos + 1];
            let mut copy = pkt.clone();
            copy.routing = Routing::Lar {
                rect,
                segment: Some((route, pos + 1)),
            };
            if self.unicast(k, me, next, copy) {
                return;
            }
        }
        let target = rect.center();
        let far = dist >= self.p.l_limit;
        if far && self.p.contacts_enabled {
            let node = &self.nodes[me.index()];
            let cands = node.contacts.values().map(|c| (c.contact, c.position));
            if let Some(c) = closer_contact(&here, &rect, cands) {
                let route = node.contacts[&c].route.clone();
                if self.lar_segment(k, me, &mut pkt, rect, route, "contact", dist) {
                    return;
                }
            }
        }
        let node = &self.nodes[me.index()];
        let nbrs = node.neighbors.iter().map(|(n, nb)| (*n, nb.position));
        if let Some(n) = greedy_next_hop(&here, &target, nbrs) {
            k.record(Some(me), "lar_hop", json!({"mode": "greedy", "dist": dist}));
            let mut copy = pkt.clone();
            copy.routing = Routing::Lar { rect, segment: None };
            if self.unicast(k, me, n, copy) {
                return;
            }
        }
        // Void: detour through a strictly closer zone member.
        let own = here.distance_sq(&target);
        let node = &self.nodes[me.index()];
        let mut best: Option<(f64, u32, NodeId)> = None;
        for (m, z) in &node.zone.members {
            if let Some(l) = node.lsdb.get(*m) {
                let d = l.position.distance_sq(&target);
                if d < own && best.is_none_or(|(bd, bh, bm)| (d, z.hops, *m) < (bd, bh, bm)) {
                    best = Some((d, z.hops, *m));
                }
            }
        }
        if let Some((_, _, m)) = best {
            if let Some(route) = self.zone_route(me, m) {
                if self.lar_segment(k, me, &mut pkt, rect, route, "detour", dist) {
                    return;
                }
            }
        }
        self.drop_packet(k, me, pkt.kind, "void");
    }

    #[allow(clippy::too_many_arguments)]
    fn lar_segment(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        pkt: &mut Packet,
        rect: Rect,
        route: Vec<NodeId>,
        mode: &str,
        dist: f64,
    ) -> bool {
        if route.len() < 2 {
            return false;
        }
        k.record(Some(me), "lar_hop", json!({"mode": mode, "dist": dist}));
        let next = route[1];
        let mut copy = pkt.clone();
        copy.routing = Routing::Lar {
            rect,
            segment: Some((route, 1)),
        };
        self.unicast(k, me, next, copy)
    }

    /// The packet reached a node inside its target region.
    fn rr_arrive(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: Packet, rect: Rect, s: f64) {
        k.record(
            Some(me),
            "rr_arrive",
            json!({"packet": pkt.kind.as_str(), "hops": pkt.path_record.len()}),
        );
        let prefix = self.grid.prefix_of_position(&rect.center());
        match &pkt.payload {
            Payload::JoinQuery { group, .. } if !self.nodes[me.index()].is_sds_for(*group) => {
                if let Some(&(sds, _)) = self.zone_members_where(me, |l| l.sds_prefix == Some(prefix)).first() {
                    if let Some(route) = self.zone_route(me, sds) {
                        let mut record = pkt.path_record.clone();
                        record.retain(|&n| n != me);
                        if self.send_source_with(k, me, route, pkt.payload.clone(), record) {
                            return;
                        }
                    }
                }
                self.geocast_from(k, me, pkt, rect);
            }
            Payload::SessionRegister { .. } if self.nodes[me.index()].sds_prefix != Some(prefix) => {
                let sds = self.zone_members_where(me, |l| l.sds_prefix == Some(prefix));
                if let Some(&(m, _)) = sds.iter().min_by_key(|(m, _)| *m) {
                    if let Some(route) = self.zone_route(me, m) {
                        let mut record = pkt.path_record.clone();
                        record.retain(|&n| n != me);
                        if self.send_source_with(k, me, route, pkt.payload.clone(), record) {
                            return;
                        }
                    }
                }
                self.geocast_from(k, me, pkt, rect);
            }
            Payload::JoinQuery { .. } | Payload::SessionRegister { .. } => {
                let rc = Rc::new(pkt);
                self.region_deliver(k, me, &rc, s, true);
            }
            _ => self.geocast_from(k, me, pkt, rect),
        }
    }

    /// Starts a region-scoped flood at `me` (which is inside `rect`).
    fn geocast_from(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: Packet, rect: Rect) {
        let mut g = pkt;
        g.routing = Routing::Geocast { rect };
        g.ttl_hops = self.p.max_hops;
        self.nodes[me.index()].seen_floods.insert(g.uid);
        let rc = Rc::new(g.clone());
        let s = g.stability;
        self.region_deliver(k, me, &rc, s, false);
        self.broadcast(k, me, g);
    }

    pub(super) fn geocast_receive(&mut self, k: &mut Kernel<Ev>, me: NodeId, _from: NodeId, pkt: &Rc<Packet>, rect: Rect, s: f64) {
        let here = self.nodes[me.index()].reported_pos;
        if !rect.contains_closed(&here) || !self.nodes[me.index()].seen_floods.insert(pkt.uid) {
            return;
        }
        self.region_deliver(k, me, pkt, s, false);
        if pkt.ttl_hops > 0 {
            k.record(Some(me), "geocast_rebroadcast", json!({"packet": pkt.kind.as_str()}));
            let mut copy = (**pkt).clone();
            copy.stability = s;
            self.broadcast(k, me, copy);
        }
    }

    /// Processes a packet addressed to a region at one of its nodes. `direct`
    /// means it arrived by unicast rather than through the region flood.
    fn region_deliver(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>, s: f64, direct: bool) {
        match &pkt.payload {
            Payload::JoinQuery { .. } => {
                self.on_join_query(k, me, pkt);
            }
            Payload::Adv { .. } => self.on_adv_at_rr(k, me, pkt, s),
            Payload::SdsLeave { .. } => self.on_sds_leave(k, me, pkt),
            Payload::SessionRegister { prefix, .. } => {
                let node = &self.nodes[me.index()];
                if node.sds_prefix != Some(*prefix) {
                    return;
                }
                let window = SimTime::from_secs(3.0 * self.p.scenario.rr.advert_period_s);
                let now = k.now();
                let lower_known = node
                    .heard_sds
                    .iter()
                    .any(|(id, (p, t))| *p == *prefix && *id < me && now.saturating_sub(*t) <= window);
                if direct || !lower_known {
                    self.on_session_register(k, me, pkt, direct);
                }
            }
            _ => {}
        }
    }

    /// Scoped flood of SDS adverts: within `R` hops, and throughout `rect`.
    pub(super) fn zone_or_region_receive(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        _from: NodeId,
        pkt: &Rc<Packet>,
        rect: Rect,
        _s: f64,
    ) {
        if !self.nodes[me.index()].seen_floods.insert(pkt.uid) {
            return;
        }
        self.on_sds_advert(k, me, pkt);
        let hops = pkt.path_record.len() as u32;
        let inside = rect.contains_closed(&self.nodes[me.index()].reported_pos);
        if (hops < self.p.radius || inside) && pkt.ttl_hops > 0 {
            let copy = (**pkt).clone();
            self.broadcast(k, me, copy);
        }
    }

    // ---- SDS election ----

    fn my_prefix(&self, me: NodeId) -> u32 {
        self.grid.prefix_of_position(&self.nodes[me.index()].reported_pos)
    }

    fn live_sds_count(&self, me: NodeId, prefix: u32, now: SimTime) -> u32 {
        let window = SimTime::from_secs(3.0 * self.p.scenario.rr.advert_period_s);
        let node = &self.nodes[me.index()];
        node.heard_sds
            .iter()
            .filter(|(id, (p, t))| **id != me && *p == prefix && now.saturating_sub(*t) <= window)
            .count() as u32
    }

    pub(super) fn sds_decision(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let now = k.now();
        let period = SimTime::from_secs(self.p.scenario.rr.decision_period_s);
        k.schedule_in(Ev::SdsDecision(me), period);
        let node = &self.nodes[me.index()];
        if !node.eligible || node.sds_prefix.is_some() || now < node.suppress_until {
            return;
        }
        let prefix = self.my_prefix(me);
        let observed = self.live_sds_count(me, prefix, now);
        let in_region = node
            .zone
            .member_ids()
            .filter(|m| node.lsdb.get(*m).is_some_and(|l| self.grid.is_inside(prefix, &l.position)))
            .count();
        let region_area = self.rect_of(prefix).area();
        let expected = expected_region_population(in_region, region_area, self.p.zone_area);
        let p = promotion_probability(node.eligible, self.p.scenario.rr.target_sds, observed, expected);
        if p > 0.0 && self.rng.random::<f64>() < p {
            self.promote_sds(k, me, prefix, observed);
        }
    }

    fn promote_sds(&mut self, k: &mut Kernel<Ev>, me: NodeId, prefix: u32, observed: u32) {
        self.nodes[me.index()].sds_prefix = Some(prefix);
        k.record(Some(me), "sds_promote", json!({"prefix": prefix, "observed": observed}));
        self.send_sds_advert(k, me, true);
        let period = SimTime::from_secs(self.p.scenario.rr.advert_period_s);
        k.schedule_in(Ev::SdsAdvertTick(me), period);
        k.schedule_in(Ev::LsaTrigger(me), self.p.lsa_delay);
        self.nodes[me.index()].lsa_pending = true;
    }

    fn send_sds_advert(&mut self, k: &mut Kernel<Ev>, me: NodeId, promotion: bool) {
        let node = &self.nodes[me.index()];
        let Some(prefix) = node.sds_prefix else { return };
        let payload = Payload::SdsAdvert {
            sds: me,
            prefix,
            position: node.reported_pos,
            promotion,
            sessions: node.sessions.all().cloned().collect(),
        };
        let contacts: Vec<Vec<NodeId>> = node.contacts.values().map(|c| c.route.clone()).collect();
        let rect = self.rect_of(prefix);
        let pkt = self.packet(me, self.p.max_hops, Routing::ZoneOrRegion { rect }, payload.clone());
        self.nodes[me.index()].seen_floods.insert(pkt.uid);
        self.broadcast(k, me, pkt);
        for route in contacts {
            self.send_source(k, me, route, payload.clone());
        }
    }

    pub(super) fn sds_advert_tick(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        if self.nodes[me.index()].sds_prefix.is_none() {
            return;
        }
        let now = k.now();
        let ttl = self.p.sender_ttl;
        let node = &mut self.nodes[me.index()];
        let local = node.local_sds.clone();
        for (g, r) in node.records.iter_mut() {
            if !local.contains(g) {
                r.expire(now, ttl);
            }
        }
        self.send_sds_advert(k, me, false);
        k.schedule_in(Ev::SdsAdvertTick(me), SimTime::from_secs(self.p.scenario.rr.advert_period_s));
    }

    pub(super) fn on_sds_advert(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::SdsAdvert {
            sds,
            prefix,
            promotion,
            ref sessions,
            ..
        } = pkt.payload
        else {
            return;
        };
        if sds == me {
            return;
        }
        let now = k.now();
        let node = &mut self.nodes[me.index()];
        node.heard_sds.insert(sds, (prefix, now));
        if node.sds_prefix == Some(prefix) {
            for s in sessions {
                if node.sessions.get(&s.addr).is_none() {
                    node.sessions.insert(s.clone());
                }
            }
            if promotion {
                let payload = Payload::SdsSync {
                    from: me,
                    records: node.records.values().cloned().collect(),
                    sessions: node.sessions.all().cloned().collect(),
                };
                self.reply_along(k, me, pkt, payload);
            }
            return;
        }
        let in_zone = node.zone.contains(sds);
        if promotion && in_zone && node.sds_prefix.is_none() && self.my_prefix(me) == prefix {
            let w = SimTime::from_secs(self.p.scenario.rr.suppress_window_s);
            let node = &mut self.nodes[me.index()];
            node.suppress_until = node.suppress_until.max(now + w);
        }
    }

    pub(super) fn on_sds_sync(&mut self, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::SdsSync {
            ref records,
            ref sessions,
            ..
        } = pkt.payload
        else {
            return;
        };
        self.absorb(me, records, sessions);
    }

    fn absorb(&mut self, me: NodeId, records: &[SdsRecord], sessions: &[SessionInfo]) {
        let node = &mut self.nodes[me.index()];
        for r in records {
            node.records.entry(r.group).or_insert_with(|| SdsRecord::new(r.group)).merge(r);
        }
        for s in sessions {
            if node.sessions.get(&s.addr).is_none() {
                node.sessions.insert(s.clone());
            }
        }
    }

    /// An SDS that moved out of its region hands its state back and steps down.
    pub(super) fn check_region_exit(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let node = &self.nodes[me.index()];
        let Some(prefix) = node.sds_prefix else { return };
        if self.grid.is_inside(prefix, &node.reported_pos) {
            return;
        }
        let node = &mut self.nodes[me.index()];
        node.sds_prefix = None;
        let local = node.local_sds.clone();
        let records: Vec<SdsRecord> = std::mem::take(&mut node.records)
            .into_iter()
            .filter_map(|(g, r)| {
                if local.contains(&g) {
                    node.records.insert(g, r);
                    None
                } else {
                    Some(r)
                }
            })
            .collect();
        let sessions: Vec<SessionInfo> = node.sessions.all().cloned().collect();
        node.sessions = Default::default();
        k.record(Some(me), "sds_leave", json!({"prefix": prefix}));
        let payload = Payload::SdsLeave {
            sds: me,
            prefix,
            records,
            sessions,
        };
        let rect = self.rect_of(prefix);
        self.lar_send(k, me, rect, payload, Vec::new());
        self.nodes[me.index()].lsa_pending = true;
        k.schedule_in(Ev::LsaTrigger(me), self.p.lsa_delay);
    }

    fn on_sds_leave(&mut self, _k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::SdsLeave {
            sds,
            prefix,
            ref records,
            ref sessions,
        } = pkt.payload
        else {
            return;
        };
        self.nodes[me.index()].heard_sds.remove(&sds);
        if self.nodes[me.index()].sds_prefix == Some(prefix) {
            self.absorb(me, records, sessions);
        }
    }

    // ---- sessions ----

    pub(super) fn register_session(&mut self, k: &mut Kernel<Ev>, me: NodeId, name: String, requested: Option<GroupAddress>) {
        let reg_id = self.next_qid(me);
        let prefix = requested.map(|g| g.prefix).unwrap_or_else(|| self.my_prefix(me));
        self.nodes[me.index()].registrations.insert(
            reg_id,
            Registration {
                name,
                prefix,
                requested,
                attempt: 0,
                timer: None,
                started: k.now(),
            },
        );
        self.send_register(k, me, reg_id);
    }

    fn send_register(&mut self, k: &mut Kernel<Ev>, me: NodeId, reg_id: u32) {
        let Some(r) = self.nodes[me.index()].registrations.get(&reg_id).cloned() else {
            return;
        };
        let delay = SimTime::from_secs(self.p.scenario.rr.register_timeout_s * 2f64.powi(r.attempt as i32));
        let h = k.schedule_in(Ev::RegisterTimeout(me, reg_id), delay);
        if let Some(reg) = self.nodes[me.index()].registrations.get_mut(&reg_id) {
            reg.timer = Some(h);
        }
        let payload = Payload::SessionRegister {
            reg_id,
            initiator: me,
            name: r.name.clone(),
            prefix: r.prefix,
            requested: r.requested,
            announce: None,
        };
        if self.nodes[me.index()].sds_prefix == Some(r.prefix) {
            let result = self.assign_session(k, me, me, reg_id, &r.name, r.prefix, r.requested);
            self.session_result(k, me, reg_id, result);
            return;
        }
        let rect = self.rect_of(r.prefix);
        self.lar_send(k, me, rect, payload, Vec::new());
    }

    #[allow(clippy::too_many_arguments)]
    fn assign_session(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        initiator: NodeId,
        reg_id: u32,
        name: &str,
        prefix: u32,
        requested: Option<GroupAddress>,
    ) -> SessionResult {
        let now = k.now();
        let max_suffix = self.grid.max_suffix();
        let info = SessionInfo {
            addr: GroupAddress::new(prefix, 0),
            initiator,
            registered_at: now,
            name: name.to_string(),
        };
        let a = self.nodes[me.index()].sessions.assign(prefix, requested, max_suffix, info);
        match a {
            Assignment::Confirmed(addr) => {
                k.record(
                    Some(me),
                    "session_assign",
                    json!({"reg_id": reg_id, "initiator": initiator.0, "addr": addr}),
                );
                if prefix != GroupAddress::SESSION_DIRECTORY.prefix {
                    let announce = self.nodes[me.index()].sessions.get(&addr).cloned();
                    let payload = Payload::SessionRegister {
                        reg_id,
                        initiator,
                        name: name.to_string(),
                        prefix: GroupAddress::SESSION_DIRECTORY.prefix,
                        requested: None,
                        announce,
                    };
                    let rect = self.rect_of(GroupAddress::SESSION_DIRECTORY.prefix);
                    self.lar_send(k, me, rect, payload, Vec::new());
                }
                SessionResult::Confirmed(addr)
            }
            Assignment::Rejected { alternative } => SessionResult::Alternative(alternative),
            Assignment::Exhausted => SessionResult::Exhausted,
        }
    }

    /// Registrar side. `reply` is false for directory announcements.
    pub(super) fn on_session_register(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>, _direct: bool) {
        let Payload::SessionRegister {
            reg_id,
            initiator,
            ref name,
            prefix,
            requested,
            ref announce,
        } = pkt.payload
        else {
            return;
        };
        if self.nodes[me.index()].sds_prefix != Some(prefix) {
            // Reached a non-server at the end of a zone route (stale LSDB); flood the region.
            let rect = self.rect_of(prefix);
            if rect.contains_closed(&self.nodes[me.index()].reported_pos) {
                let mut copy = (**pkt).clone();
                copy.routing = Routing::Geocast { rect };
                self.geocast_from(k, me, copy, rect);
            }
            return;
        }
        if let Some(info) = announce {
            self.nodes[me.index()].sessions.insert(info.clone());
            return;
        }
        let name = name.clone();
        let result = self.assign_session(k, me, initiator, reg_id, &name, prefix, requested);
        self.reply_along(k, me, pkt, Payload::SessionReply { reg_id, result });
    }

    pub(super) fn on_session_reply(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::SessionReply { reg_id, ref result } = pkt.payload else {
            return;
        };
        let result = result.clone();
        self.session_result(k, me, reg_id, result);
    }

    fn session_result(&mut self, k: &mut Kernel<Ev>, me: NodeId, reg_id: u32, result: SessionResult) {
        let now = k.now();
        let Some(reg) = self.nodes[me.index()].registrations.get(&reg_id).cloned() else {
            return;
        };
        if let Some(h) = reg.timer {
            k.cancel(h);
        }
        match result {
            SessionResult::Confirmed(addr) => {
                self.nodes[me.index()].registrations.remove(&reg_id);
                k.record(
                    Some(me),
                    "session_register",
                    json!({
                        "reg_id": reg_id,
                        "name": reg.name,
                        "addr": addr,
                        "confirmed": true,
                        "attempts": reg.attempt + 1,
                        "latency_s": now.saturating_sub(reg.started).as_secs(),
                    }),
                );
            }
            SessionResult::Alternative(alt) => {
                if let Some(r) = self.nodes[me.index()].registrations.get_mut(&reg_id) {
                    r.requested = Some(alt);
                    r.attempt += 1;
                    r.timer = None;
                }
                self.send_register(k, me, reg_id);
            }
            SessionResult::Exhausted => {
                self.nodes[me.index()].registrations.remove(&reg_id);
                k.record(
                    Some(me),
                    "session_register",
                    json!({"reg_id": reg_id, "name": reg.name, "confirmed": false, "exhausted": true}),
                );
            }
        }
    }

    pub(super) fn register_timeout(&mut self, k: &mut Kernel<Ev>, me: NodeId, reg_id: u32) {
        let retries = self.p.scenario.rr.register_retries;
        let Some(r) = self.nodes[me.index()].registrations.get_mut(&reg_id) else {
            return;
        };
        r.timer = None;
        r.attempt += 1;
        if r.attempt <= retries {
            self.send_register(k, me, reg_id);
            return;
        }
        let r = self.nodes[me.index()].registrations.remove(&reg_id).expect("present");
        let max = self.grid.max_suffix();
        let addr = r.requested.unwrap_or_else(|| {
            let lo = u32::from(r.prefix == 0);
            GroupAddress::new(r.prefix, self.rng.random_range(lo..=max.max(lo)))
        });
        k.record(
            Some(me),
            "session_register",
            json!({"reg_id": reg_id, "name": r.name, "addr": addr, "confirmed": false, "attempts": r.attempt}),
        );
    }

}
