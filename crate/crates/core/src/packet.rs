//! Wire format shared by every protocol layer.

use std::rc::Rc;

use crate::geo::{Position, Rect};
use crate::rendezvous::{GroupAddress, SdsRecord, SessionInfo};
use crate::zone::LinkStateAdvert;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PacketKind {
    Hello,
    ZoneLinkState,
    BordercastQuery,
    BordercastReply,
    ContactMaint,
    Adv,
    JoinQuery,
    JoinReply,
    JoinRequest,
    JoinFail,
    Prune,
    Data,
    SdsAdvert,
    SdsLeave,
    SessionRegister,
    SessionReply,
    GroupQuery,
    GroupQueryReply,
}

impl PacketKind {
    pub const ALL: [PacketKind; 18] = [
        PacketKind::Hello,
        PacketKind::ZoneLinkState,
        PacketKind::BordercastQuery,
        PacketKind::BordercastReply,
        PacketKind::ContactMaint,
        PacketKind::Adv,
        PacketKind::JoinQuery,
        PacketKind::JoinReply,
        PacketKind::JoinRequest,
        PacketKind::JoinFail,
        PacketKind::Prune,
        PacketKind::Data,
        PacketKind::SdsAdvert,
        PacketKind::SdsLeave,
        PacketKind::SessionRegister,
        PacketKind::SessionReply,
        PacketKind::GroupQuery,
        PacketKind::GroupQueryReply,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PacketKind::Hello => "hello",
            PacketKind::ZoneLinkState => "zone_link_state",
            PacketKind::BordercastQuery => "bordercast_query",
            PacketKind::BordercastReply => "bordercast_reply",
            PacketKind::ContactMaint => "contact_maint",
            PacketKind::Adv => "adv",
            PacketKind::JoinQuery => "join_query",
            PacketKind::JoinReply => "join_reply",
            PacketKind::JoinRequest => "join_request",
            PacketKind::JoinFail => "join_fail",
            PacketKind::Prune => "prune",
            PacketKind::Data => "data",
            PacketKind::SdsAdvert => "sds_advert",
            PacketKind::SdsLeave => "sds_leave",
            PacketKind::SessionRegister => "session_register",
            PacketKind::SessionReply => "session_reply",
            PacketKind::GroupQuery => "group_query",
            PacketKind::GroupQueryReply => "group_query_reply",
        }
    }

    pub fn is_data(self) -> bool {
        self == PacketKind::Data
    }
}

/// How a packet moves from hop to hop.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// One-hop broadcast; floods relay it while `ttl_hops` lasts.
    Broadcast,
    /// Explicit node list; `pos` is the index of the node holding the packet.
    Source { route: Vec<NodeId>, pos: usize },
    /// Mesh-state driven unicast: the receiver decides the next hop.
    Mesh,
    /// Lollipop forwarding toward `rect`. While `segment` is set the packet
    /// follows an intra-zone or contact route before the next geographic decision.
    Lar {
        rect: Rect,
        segment: Option<(Vec<NodeId>, usize)>,
    },
    /// Scoped flood: only nodes inside `rect` rebroadcast.
    Geocast { rect: Rect },
    /// Flood within `ttl_hops`, and additionally through every node inside `rect`.
    ZoneOrRegion { rect: Rect },
}

/// What a bordercast query is looking for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryTarget {
    Node(NodeId),
    SdsFor(u32),
}

/// Why a bordercast query was issued; echoed in the reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPurpose {
    Route,
    Contact,
    JoinRoute(GroupAddress),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaintPhase {
    Probe,
    Ack {
        position: Position,
        sds_prefix: Option<u32>,
    },
    /// Repair failed at the sending node; `too_far` when the splice broke the hop bound.
    Fail { too_far: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenderInfo {
    pub sender: NodeId,
    pub position: Position,
    /// Known route from the answering node to the sender, answering node first.
    pub route: Option<Vec<NodeId>>,
    pub stability: f64,
}

/// A receiver's membership on one upstream path: `(receiver, join sequence)`.
pub type MemberKey = (NodeId, u32);

#[derive(Debug, Clone, PartialEq)]
pub enum SessionResult {
    Confirmed(GroupAddress),
    Alternative(GroupAddress),
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello {
        position: Position,
        energy_left: f64,
        drain: f64,
    },
    LinkState(Rc<LinkStateAdvert>),
    BordercastQuery {
        origin: NodeId,
        qid: u32,
        target: QueryTarget,
        round: u32,
        budget: u32,
        purpose: QueryPurpose,
    },
    BordercastReply {
        origin: NodeId,
        qid: u32,
        purpose: QueryPurpose,
        target: QueryTarget,
        /// Complete path origin..target.
        path: Vec<NodeId>,
    },
    ContactMaint {
        owner: NodeId,
        contact: NodeId,
        nonce: u32,
        phase: MaintPhase,
    },
    Adv {
        group: GroupAddress,
        sender: NodeId,
        seq: u32,
        sender_pos: Position,
        /// Per-hop stability of each traversed link, in path order.
        stabilities: Vec<f64>,
    },
    JoinQuery {
        joiner: NodeId,
        qid: u32,
        group: GroupAddress,
        stage: u8,
        /// Remaining contact recursion; a contact with depth 0 does not consult its contacts.
        contact_depth: u8,
        /// Sent by a freshly promoted local SDS to pull the RR's record.
        sync: bool,
    },
    JoinReply {
        qid: u32,
        group: GroupAddress,
        stage: u8,
        responder: NodeId,
        /// The responder is an SDS for the group (its answer is definitive even if empty).
        authoritative: bool,
        senders: Vec<SenderInfo>,
        /// Path from the responder to an on-mesh node, responder first.
        attach: Option<Vec<NodeId>>,
        sessions: Vec<SessionInfo>,
    },
    JoinRequest {
        group: GroupAddress,
        keys: Vec<MemberKey>,
        active: bool,
        /// Key whose parent chain to follow once the explicit route is exhausted.
        follow: Option<MemberKey>,
    },
    JoinFail {
        group: GroupAddress,
        keys: Vec<MemberKey>,
    },
    Prune {
        group: GroupAddress,
        key: MemberKey,
    },
    Data {
        group: GroupAddress,
        src: NodeId,
        seq: u32,
        hops: u32,
        size: u32,
    },
    SdsAdvert {
        sds: NodeId,
        prefix: u32,
        position: Position,
        promotion: bool,
        sessions: Vec<SessionInfo>,
    },
    SdsSync {
        from: NodeId,
        records: Vec<SdsRecord>,
        sessions: Vec<SessionInfo>,
    },
    SdsLeave {
        sds: NodeId,
        prefix: u32,
        records: Vec<SdsRecord>,
        sessions: Vec<SessionInfo>,
    },
    SessionRegister {
        reg_id: u32,
        initiator: NodeId,
        name: String,
        prefix: u32,
        requested: Option<GroupAddress>,
        /// Directory announcement of an already confirmed address.
        announce: Option<SessionInfo>,
    },
    SessionReply {
        reg_id: u32,
        result: SessionResult,
    },
    GroupQuery {
        origin: NodeId,
        qid: u32,
        group: GroupAddress,
    },
    GroupQueryReply {
        qid: u32,
        group: GroupAddress,
        member: bool,
        sds: bool,
    },
}

impl Payload {
    pub fn kind(&self) -> PacketKind {
        match self {
            Payload::Hello { .. } => PacketKind::Hello,
            Payload::LinkState(_) => PacketKind::ZoneLinkState,
            Payload::BordercastQuery { .. } => PacketKind::BordercastQuery,
            Payload::BordercastReply { .. } => PacketKind::BordercastReply,
            Payload::ContactMaint { .. } => PacketKind::ContactMaint,
            Payload::Adv { .. } => PacketKind::Adv,
            Payload::JoinQuery { .. } => PacketKind::JoinQuery,
            Payload::JoinReply { .. } => PacketKind::JoinReply,
            Payload::JoinRequest { .. } => PacketKind::JoinRequest,
            Payload::JoinFail { .. } => PacketKind::JoinFail,
            Payload::Prune { .. } => PacketKind::Prune,
            Payload::Data { .. } => PacketKind::Data,
            Payload::SdsAdvert { .. } | Payload::SdsSync { .. } => PacketKind::SdsAdvert,
            Payload::SdsLeave { .. } => PacketKind::SdsLeave,
            Payload::SessionRegister { .. } => PacketKind::SessionRegister,
            Payload::SessionReply { .. } => PacketKind::SessionReply,
            Payload::GroupQuery { .. } => PacketKind::GroupQuery,
            Payload::GroupQueryReply { .. } => PacketKind::GroupQueryReply,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub kind: PacketKind,
    pub src: NodeId,
    /// Originator-unique id, used for flood duplicate suppression.
    pub uid: (NodeId, u32),
    pub ttl_hops: u32,
    pub path_record: Vec<NodeId>,
    /// Bottleneck link stability over the hops travelled so far.
    pub stability: f64,
    pub routing: Routing,
    pub payload: Payload,
}

impl Packet {
    pub fn new(src: NodeId, seq: u32, ttl_hops: u32, routing: Routing, payload: Payload) -> Self {
        Packet {
            kind: payload.kind(),
            src,
            uid: (src, seq),
            ttl_hops,
            path_record: Vec::new(),
            stability: 1.0,
            routing,
            payload,
        }
    }

    /// Appends `me` as a transmitter. A revisit cuts the loop out so the
    /// record stays duplicate-free and still describes a walk back.
    pub fn record_hop(&mut self, me: NodeId) {
        if let Some(i) = self.path_record.iter().position(|&n| n == me) {
            self.path_record.truncate(i + 1);
        } else {
            self.path_record.push(me);
        }
    }

    /// Source route back to the originator from `me`: `[me] + reverse(record)`.
    pub fn reverse_route(&self, me: NodeId) -> Vec<NodeId> {
        let mut route = Vec::with_capacity(self.path_record.len() + 1);
        route.push(me);
        route.extend(self.path_record.iter().rev().copied().filter(|&n| n != me));
        simple_path(route)
    }
}

/// Removes loops from a walk so every node appears once.
pub fn simple_path(walk: Vec<NodeId>) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = Vec::with_capacity(walk.len());
    for n in walk {
        if let Some(i) = out.iter().position(|&m| m == n) {
            out.truncate(i + 1);
        } else {
            out.push(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|&n| NodeId(n)).collect()
    }

    #[test]
    fn record_hop_erases_loops() {
        let mut p = Packet::new(
            NodeId(0),
            0,
            5,
            Routing::Broadcast,
            Payload::Prune {
                group: GroupAddress::new(0, 1),
                key: (NodeId(0), 0),
            },
        );
        for n in [0, 1, 2, 3, 1, 4] {
            p.record_hop(NodeId(n));
        }
        assert_eq!(p.path_record, ids(&[0, 1, 4]));
        assert_eq!(p.reverse_route(NodeId(9)), ids(&[9, 4, 1, 0]));
    }

    #[test]
    fn simple_path_is_identity_on_paths() {
        assert_eq!(simple_path(ids(&[3, 1, 2])), ids(&[3, 1, 2]));
        assert_eq!(simple_path(ids(&[3, 1, 2, 1, 5])), ids(&[3, 1, 5]));
    }

    #[test]
    fn kind_follows_payload() {
        for k in PacketKind::ALL {
            assert!(!k.as_str().is_empty());
        }
        let p = Payload::Data {
            group: GroupAddress::new(1, 2),
            src: NodeId(1),
            seq: 0,
            hops: 0,
            size: 10,
        };
        assert!(p.kind().is_data());
    }
}
