//! Contact selection and maintenance, and bordercast queries.

use std::rc::Rc;

use rand::Rng;
use serde_json::json;

use super::{Ev, PendingQuery, State};
use crate::contacts::{departed, energy_estimate, selection_probability, splice_route, Capabilities, ContactEntry, SelectionInputs};
use crate::kernel::Kernel;
use crate::packet::{simple_path, MaintPhase, Packet, Payload, QueryPurpose, QueryTarget, Routing};
use crate::time::SimTime;
use crate::zone::ZoneTable;
use crate::NodeId;

/// Time a bordercast origin waits per round before giving up.
const ROUND_WAIT_S: f64 = 0.5;

impl State {
    // ---- selection ----

    pub(super) fn contacts_on_zone_change(&mut self, k: &mut Kernel<Ev>, me: NodeId, old: &ZoneTable) {
        if !self.p.contacts_enabled {
            return;
        }
        let now = k.now();
        let demoted: Vec<NodeId> = {
            let node = &self.nodes[me.index()];
            node.contacts.keys().filter(|c| node.zone.contains(**c)).copied().collect()
        };
        for c in demoted {
            self.drop_contact(k, me, c, "demoted");
        }
        let gone = departed(old, &self.nodes[me.index()].zone);
        for c in gone {
            let node = &self.nodes[me.index()];
            let pending = node
                .pending_queries
                .values()
                .filter(|q| matches!(q, PendingQuery::Contact(_)))
                .count();
            if node.contacts.contains_key(&c)
                || node.pending_queries.values().any(|q| *q == PendingQuery::Contact(c))
                || node.contacts.len() + pending >= self.p.max_contacts
            {
                continue;
            }
            let Some(inputs) = self.selection_inputs(me, c, old, now) else {
                continue;
            };
            let mut p = selection_probability(&inputs, &self.p.selection);
            if self.p.capability_bonus > 0.0 && self.nodes[me.index()].lsdb.get(c).is_some_and(|l| l.sds_prefix.is_some()) {
                p = (p + self.p.capability_bonus).min(1.0);
            }
            let draw: f64 = self.rng.random();
            let chosen = draw < p;
            k.record(
                Some(me),
                "contact_candidate",
                json!({"candidate": c.0, "p": p, "selected": chosen}),
            );
            if chosen {
                let qid = self.next_qid(me);
                self.nodes[me.index()].pending_queries.insert(qid, PendingQuery::Contact(c));
                k.schedule_in(Ev::BordercastTimeout(me, qid), SimTime::from_secs(ROUND_WAIT_S));
                self.bordercast_from(k, me, qid, QueryTarget::Node(c), QueryPurpose::Contact, 1);
            }
        }
    }

    fn selection_inputs(&self, me: NodeId, c: NodeId, old: &ZoneTable, now: SimTime) -> Option<SelectionInputs> {
        let node = &self.nodes[me.index()];
        let lsa = node.lsdb.get(c)?;
        let e_est = energy_estimate((node.energy_left(now), node.drain), (lsa.energy_left, lsa.drain)).ok()?;
        let s_est = old
            .members
            .get(&c)
            .filter(|m| node.neighbors.contains_key(&m.next_hop))
            .map(|m| self.link_stability(me, m.next_hop))
            .unwrap_or(0.0);
        let a_est = node.activity.rate(now);
        let zone_contacts: u32 = node
            .zone
            .members
            .keys()
            .filter_map(|m| node.lsdb.get(*m))
            .map(|l| l.contact_count)
            .sum();
        Some(SelectionInputs {
            e_est,
            s_est,
            a_est,
            z_est: node.contacts.len() as u32 + zone_contacts + 1,
        })
    }

    fn add_contact(&mut self, k: &mut Kernel<Ev>, me: NodeId, c: NodeId, route: Vec<NodeId>) {
        let now = k.now();
        let node = &self.nodes[me.index()];
        if route.len() < 2
            || route.len() - 1 > self.p.contact_bound
            || node.zone.contains(c)
            || node.contacts.contains_key(&c)
            || node.contacts.len() >= self.p.max_contacts
        {
            return;
        }
        let lsa = node.lsdb.get(c);
        let e_contact = lsa.map(|l| l.energy_left / l.drain.max(f64::MIN_POSITIVE)).unwrap_or(0.0);
        let sds_for = lsa.and_then(|l| l.sds_prefix);
        let position = lsa.map(|l| l.position).unwrap_or(node.reported_pos);
        let s_est = self.link_stability(me, route[1]);
        let hops = route.len() - 1;
        self.nodes[me.index()].contacts.insert(
            c,
            ContactEntry {
                contact: c,
                route,
                established_at: now,
                last_refresh: now,
                s_est,
                e_est_contact: e_contact,
                capabilities: Capabilities { gps: true, sds_for },
                position,
            },
        );
        k.record(Some(me), "contact_add", json!({"contact": c.0, "hops": hops}));
    }

    pub(super) fn drop_contact(&mut self, k: &mut Kernel<Ev>, me: NodeId, c: NodeId, reason: &str) {
        if self.nodes[me.index()].contacts.remove(&c).is_some() {
            k.record(Some(me), "contact_drop", json!({"contact": c.0, "reason": reason}));
        }
    }

    // ---- maintenance ----

    pub(super) fn contact_maintenance(&mut self, k: &mut Kernel<Ev>, me: NodeId) {
        let bound = self.p.contact_bound;
        let node = &self.nodes[me.index()];
        let count = node.contacts.len();
        let max_hops = node.contacts.values().map(|c| c.hops()).max().unwrap_or(0);
        k.record(
            Some(me),
            "contact_check",
            json!({"count": count, "max_hops": max_hops, "bound": bound}),
        );
        let contacts: Vec<(NodeId, Vec<NodeId>)> = node.contacts.values().map(|c| (c.contact, c.route.clone())).collect();
        for (c, route) in contacts {
            let nonce = self.next_qid(me);
            self.nodes[me.index()].pending_maint.insert(nonce, c);
            k.schedule_in(Ev::MaintTimeout(me, nonce), self.p.maint_period.scale(0.5));
            let payload = Payload::ContactMaint {
                owner: me,
                contact: c,
                nonce,
                phase: MaintPhase::Probe,
            };
            if !self.send_source(k, me, route.clone(), payload) {
                // First hop gone: try a splice from here before giving up.
                if let Some(fixed) = self.splice_at(me, &route, 0) {
                    if fixed.len() - 1 <= bound {
                        let payload = Payload::ContactMaint {
                            owner: me,
                            contact: c,
                            nonce,
                            phase: MaintPhase::Probe,
                        };
                        if self.send_source(k, me, fixed, payload) {
                            continue;
                        }
                    }
                }
                self.nodes[me.index()].pending_maint.remove(&nonce);
                self.drop_contact(k, me, c, "repair_failed");
            }
        }
        k.schedule_in(Ev::ContactMaint(me), self.p.maint_period);
    }

    pub(super) fn maint_timeout(&mut self, k: &mut Kernel<Ev>, me: NodeId, nonce: u32) {
        if let Some(c) = self.nodes[me.index()].pending_maint.remove(&nonce) {
            self.drop_contact(k, me, c, "timeout");
        }
    }

    /// Repairs `route` at index `at` (held by `me`) through `me`'s zone to the
    /// farthest later route node it can reach.
    fn splice_at(&self, me: NodeId, route: &[NodeId], at: usize) -> Option<Vec<NodeId>> {
        let broken = route.get(at + 1).copied();
        for j in (at + 1..route.len()).rev() {
            let target = route[j];
            if Some(target) == broken && j == at + 1 {
                continue;
            }
            if let Some(detour) = self.zone_route(me, target) {
                if broken.is_some_and(|b| detour.contains(&b)) {
                    continue;
                }
                if let Some(r) = splice_route(route, at, &detour) {
                    return Some(r);
                }
            }
        }
        None
    }

    /// A probe or reply passing through `me`.
    pub(super) fn forward_maint(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let (Routing::Source { route, pos }, Payload::ContactMaint { owner, contact, nonce, phase }) =
            (&pkt.routing, &pkt.payload)
        else {
            return;
        };
        let next = route[pos + 1];
        let mut copy = (**pkt).clone();
        copy.routing = Routing::Source {
            route: route.clone(),
            pos: pos + 1,
        };
        if self.unicast(k, me, next, copy) || !matches!(phase, MaintPhase::Probe) {
            return;
        }
        let bound = self.p.contact_bound;
        let outcome = match self.splice_at(me, route, *pos) {
            Some(fixed) if fixed.len() - 1 <= bound => {
                let at = fixed.iter().position(|&n| n == me).unwrap_or(0);
                let mut copy = (**pkt).clone();
                copy.routing = Routing::Source {
                    route: fixed.clone(),
                    pos: at + 1,
                };
                if self.unicast(k, me, fixed[at + 1], copy) {
                    k.record(
                        Some(me),
                        "contact_repair",
                        json!({"owner": owner.0, "contact": contact.0, "hops": fixed.len() - 1}),
                    );
                    return;
                }
                false
            }
            Some(_) => true,
            None => false,
        };
        let back: Vec<NodeId> = route[..=*pos].iter().rev().copied().collect();
        let payload = Payload::ContactMaint {
            owner: *owner,
            contact: *contact,
            nonce: *nonce,
            phase: MaintPhase::Fail { too_far: outcome },
        };
        if back.len() >= 2 {
            self.send_source(k, me, back, payload);
        }
    }

    pub(super) fn on_maint_final(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let (Routing::Source { route, .. }, Payload::ContactMaint { owner, contact, nonce, phase }) =
            (&pkt.routing, &pkt.payload)
        else {
            return;
        };
        match phase {
            MaintPhase::Probe => {
                if *contact != me {
                    return;
                }
                let node = &self.nodes[me.index()];
                let payload = Payload::ContactMaint {
                    owner: *owner,
                    contact: me,
                    nonce: *nonce,
                    phase: MaintPhase::Ack {
                        position: node.reported_pos,
                        sds_prefix: node.sds_prefix,
                    },
                };
                let back: Vec<NodeId> = simple_path(route.iter().rev().copied().collect());
                self.send_source(k, me, back, payload);
            }
            MaintPhase::Ack { position, sds_prefix } => {
                if *owner != me || self.nodes[me.index()].pending_maint.remove(nonce).is_none() {
                    return;
                }
                let fwd: Vec<NodeId> = route.iter().rev().copied().collect();
                let now = k.now();
                if self.nodes[me.index()].zone.contains(*contact) {
                    self.drop_contact(k, me, *contact, "demoted");
                    return;
                }
                if fwd.len() - 1 > self.p.contact_bound {
                    self.drop_contact(k, me, *contact, "too_far");
                    return;
                }
                let s = self.link_stability(me, fwd[1]);
                if let Some(e) = self.nodes[me.index()].contacts.get_mut(contact) {
                    e.route = fwd;
                    e.last_refresh = now;
                    e.position = *position;
                    e.capabilities.sds_for = *sds_prefix;
                    e.s_est = s;
                }
            }
            MaintPhase::Fail { too_far } => {
                if *owner != me {
                    return;
                }
                self.nodes[me.index()].pending_maint.remove(nonce);
                let reason = if *too_far { "too_far" } else { "repair_failed" };
                self.drop_contact(k, me, *contact, reason);
            }
        }
    }

    // ---- bordercast ----

    /// Starts a bordercast for `target` with round budget `budget`.
    pub(crate) fn bordercast_from(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        qid: u32,
        target: QueryTarget,
        purpose: QueryPurpose,
        budget: u32,
    ) {
        self.nodes[me.index()].seen_queries.insert((me, qid));
        k.record(
            Some(me),
            "bordercast_send",
            json!({"qid": qid, "target": target_json(target), "budget": budget}),
        );
        if let Some(path) = self.local_answer(me, target) {
            self.bordercast_result(k, me, qid, purpose, target, path);
            return;
        }
        let payload = Payload::BordercastQuery {
            origin: me,
            qid,
            target,
            round: 0,
            budget,
            purpose,
        };
        self.spread_query(k, me, payload, &[]);
    }

    /// Unicasts a query to every border node and contact not already on `record`.
    fn spread_query(&mut self, k: &mut Kernel<Ev>, me: NodeId, payload: Payload, record: &[NodeId]) {
        let node = &self.nodes[me.index()];
        let border: Vec<NodeId> = node
            .zone
            .border_set
            .iter()
            .filter(|b| !record.contains(b))
            .copied()
            .collect();
        let contacts: Vec<Vec<NodeId>> = node
            .contacts
            .values()
            .filter(|c| !record.contains(&c.contact))
            .map(|c| c.route.clone())
            .collect();
        for b in border {
            if let Some(route) = self.zone_route(me, b) {
                self.send_source_with(k, me, route, payload.clone(), record.to_vec());
            }
        }
        if !contacts.is_empty() {
            if let Payload::BordercastQuery { qid, origin, .. } = &payload {
                k.record(
                    Some(me),
                    "contact_query",
                    json!({"origin": origin.0, "qid": qid, "contacts": contacts.len()}),
                );
            }
        }
        for route in contacts {
            self.send_source_with(k, me, route, payload.clone(), record.to_vec());
        }
    }

    /// Path `[me, ..., answer]` if `me`'s zone (or contact list) satisfies `target`.
    fn local_answer(&self, me: NodeId, target: QueryTarget) -> Option<Vec<NodeId>> {
        let node = &self.nodes[me.index()];
        match target {
            QueryTarget::Node(t) if t == me => Some(vec![me]),
            QueryTarget::Node(t) => self
                .zone_route(me, t)
                .or_else(|| node.contacts.get(&t).map(|c| c.route.clone())),
            QueryTarget::SdsFor(p) if node.sds_prefix == Some(p) => Some(vec![me]),
            QueryTarget::SdsFor(p) => self
                .zone_members_where(me, |l| l.sds_prefix == Some(p))
                .first()
                .and_then(|&(m, _)| self.zone_route(me, m)),
        }
    }

    pub(super) fn on_bordercast_query(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::BordercastQuery {
            origin,
            qid,
            target,
            round,
            budget,
            purpose,
        } = pkt.payload
        else {
            return;
        };
        self.nodes[me.index()].activity.observe(k.now());
        if !self.nodes[me.index()].seen_queries.insert((origin, qid)) {
            return;
        }
        if let Some(tail) = self.local_answer(me, target) {
            let mut path = pkt.path_record.clone();
            path.extend(tail);
            let path = simple_path(path);
            let reply = Payload::BordercastReply {
                origin,
                qid,
                purpose,
                target,
                path,
            };
            k.record(Some(me), "bordercast_reply", json!({"origin": origin.0, "qid": qid, "round": round}));
            self.reply_along(k, me, pkt, reply);
            return;
        }
        if round + 1 < budget {
            let payload = Payload::BordercastQuery {
                origin,
                qid,
                target,
                round: round + 1,
                budget,
                purpose,
            };
            let record = pkt.path_record.clone();
            self.spread_query(k, me, payload, &record);
        }
    }

    pub(super) fn on_bordercast_reply(&mut self, k: &mut Kernel<Ev>, me: NodeId, pkt: &Rc<Packet>) {
        let Payload::BordercastReply {
            origin,
            qid,
            purpose,
            target,
            ref path,
        } = pkt.payload
        else {
            return;
        };
        if origin != me {
            return;
        }
        let path = path.clone();
        self.bordercast_result(k, me, qid, purpose, target, path);
    }

    fn bordercast_result(
        &mut self,
        k: &mut Kernel<Ev>,
        me: NodeId,
        qid: u32,
        purpose: QueryPurpose,
        target: QueryTarget,
        path: Vec<NodeId>,
    ) {
        match purpose {
            QueryPurpose::Contact => {
                if let (Some(PendingQuery::Contact(c)), QueryTarget::Node(t)) =
                    (self.nodes[me.index()].pending_queries.remove(&qid), target)
                {
                    if c == t {
                        self.add_contact(k, me, c, path);
                    }
                }
            }
            QueryPurpose::Route => {
                if let Some(PendingQuery::Route { target: t, started }) = self.nodes[me.index()].pending_queries.remove(&qid)
                {
                    k.record(
                        Some(me),
                        "route_result",
                        json!({
                            "target": t.0,
                            "found": true,
                            "hops": path.len().saturating_sub(1),
                            "latency_s": k.now().saturating_sub(started).as_secs(),
                        }),
                    );
                }
            }
            QueryPurpose::JoinRoute(g) => {
                if let QueryTarget::Node(t) = target {
                    self.join_route_reply(k, me, g, t, path);
                }
            }
        }
    }

    pub(super) fn bordercast_timeout(&mut self, k: &mut Kernel<Ev>, me: NodeId, qid: u32) {
        match self.nodes[me.index()].pending_queries.remove(&qid) {
            Some(PendingQuery::Route { target, .. }) => {
                k.record(Some(me), "route_result", json!({"target": target.0, "found": false}));
            }
            Some(PendingQuery::Contact(c)) => {
                k.record(Some(me), "contact_candidate_lost", json!({"candidate": c.0}));
            }
            _ => {}
        }
    }

    /// Background route discovery used to exercise the discovery-rate estimate.
    pub(super) fn route_query(&mut self, k: &mut Kernel<Ev>, a: NodeId, b: NodeId, rounds: u32) {
        let qid = self.next_qid(a);
        let now = k.now();
        self.nodes[a.index()]
            .pending_queries
            .insert(qid, PendingQuery::Route { target: b, started: now });
        k.schedule_in(Ev::BordercastTimeout(a, qid), SimTime::from_secs(ROUND_WAIT_S * rounds as f64));
        self.bordercast_from(k, a, qid, QueryTarget::Node(b), QueryPurpose::Route, rounds);
    }
}

fn target_json(t: QueryTarget) -> serde_json::Value {
    match t {
        QueryTarget::Node(n) => json!({"node": n.0}),
        QueryTarget::SdsFor(p) => json!({"sds_for": p}),
    }
}
