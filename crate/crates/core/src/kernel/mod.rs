//! Event engine, node registry and one-hop delivery.

pub mod queue;
pub mod radio;
pub mod spatial;
pub mod trace;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde_json::json;

use crate::error::SimError;
use crate::geo::Position;
use crate::packet::{Packet, PacketKind};
use crate::time::SimTime;
use crate::NodeId;

pub use queue::{EventHandle, EventQueue};
pub use radio::RadioModel;
pub use spatial::SpatialGrid;
pub use trace::{Trace, TraceEvent, TraceLevel};

/// One transmission arriving at a batch of receivers.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub from: NodeId,
    /// Receivers in id order with the received power of this copy.
    pub receivers: Vec<(NodeId, f64)>,
    pub packet: Rc<Packet>,
}

#[derive(Debug)]
pub enum Fired<E> {
    Deliver(Delivery),
    Timer(E),
}

pub struct Kernel<E> {
    width: f64,
    height: f64,
    radio: RadioModel,
    latency: SimTime,
    positions: Vec<Position>,
    alive: Vec<bool>,
    grid: SpatialGrid,
    /// Per-node `(neighbor, received power)` lists, valid until positions change.
    link_cache: RefCell<Vec<Option<Rc<[(NodeId, f64)]>>>>,
    queue: EventQueue<Fired<E>>,
    trace: Trace,
    tx_counts: BTreeMap<PacketKind, u64>,
    processed: u64,
}

impl<E> Kernel<E> {
    pub fn new(
        width: f64,
        height: f64,
        radio: RadioModel,
        positions: Vec<Position>,
        level: TraceLevel,
    ) -> Result<Self, SimError> {
        radio.validate()?;
        let n = positions.len();
        let alive = vec![true; n];
        let mut grid = SpatialGrid::new(width, height, radio.range_m);
        grid.rebuild(&positions, &alive);
        Ok(Kernel {
            width,
            height,
            latency: SimTime::from_secs(radio.latency_s).max(SimTime::from_micros(1)),
            radio,
            positions,
            alive,
            grid,
            link_cache: RefCell::new(vec![None; n]),
            queue: EventQueue::new(),
            trace: Trace::new(level),
            tx_counts: BTreeMap::new(),
            processed: 0,
        })
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn area(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    pub fn radio(&self) -> &RadioModel {
        &self.radio
    }

    pub fn latency(&self) -> SimTime {
        self.latency
    }

    fn check(&self, node: NodeId) -> Result<(), SimError> {
        if node.index() < self.positions.len() {
            Ok(())
        } else {
            Err(SimError::UnknownNode(node))
        }
    }

    pub fn position(&self, node: NodeId) -> Position {
        self.positions[node.index()]
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.alive[node.index()]
    }

    /// Replaces every position at once (one mobility step).
    pub fn set_positions(&mut self, positions: Vec<Position>) {
        debug_assert_eq!(positions.len(), self.positions.len());
        self.positions = positions;
        self.topology_changed();
    }

    pub fn set_position(&mut self, node: NodeId, p: Position) {
        self.positions[node.index()] = p;
        self.topology_changed();
    }

    /// Removes a node from the radio graph permanently.
    pub fn kill(&mut self, node: NodeId) {
        self.alive[node.index()] = false;
        self.topology_changed();
    }

    fn topology_changed(&mut self) {
        self.grid.rebuild(&self.positions, &self.alive);
        self.link_cache.get_mut().iter_mut().for_each(|l| *l = None);
    }

    /// Live nodes in range of a live `node`, by id, with received power.
    fn links(&self, node: NodeId) -> Rc<[(NodeId, f64)]> {
        if let Some(l) = &self.link_cache.borrow()[node.index()] {
            return l.clone();
        }
        let me = self.positions[node.index()];
        let mut out: Vec<(NodeId, f64)> = self
            .grid
            .candidates(&me)
            .filter_map(|n| {
                let d2 = me.distance_sq(&self.positions[n.index()]);
                (n != node && self.radio.in_range(d2)).then(|| (n, self.radio.received_power(d2.sqrt())))
            })
            .collect();
        out.sort_unstable_by_key(|e| e.0);
        let l: Rc<[(NodeId, f64)]> = out.into();
        self.link_cache.borrow_mut()[node.index()] = Some(l.clone());
        l
    }

    pub fn schedule(&mut self, event: E, at: SimTime) -> Result<EventHandle, SimError> {
        self.queue.schedule(Fired::Timer(event), at)
    }

    pub fn schedule_in(&mut self, event: E, delay: SimTime) -> EventHandle {
        let at = self.now() + delay;
        self.queue
            .schedule(Fired::Timer(event), at)
            .expect("future time is never in the past")
    }

    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue.cancel(handle)
    }

    pub fn in_link(&self, a: NodeId, b: NodeId) -> bool {
        a != b
            && self.alive[a.index()]
            && self.alive[b.index()]
            && self
                .radio
                .in_range(self.positions[a.index()].distance_sq(&self.positions[b.index()]))
    }

    /// Every live node within range of `node`, sorted by id.
    pub fn neighbors(&self, node: NodeId) -> Result<Vec<NodeId>, SimError> {
        self.check(node)?;
        if !self.alive[node.index()] {
            return Ok(Vec::new());
        }
        Ok(self.links(node).iter().map(|e| e.0).collect())
    }

    fn count_tx(&mut self, sender: NodeId, packet: &mut Packet) -> Result<(), SimError> {
        self.check(sender)?;
        if packet.ttl_hops == 0 {
            return Err(SimError::TtlExhausted(sender));
        }
        packet.ttl_hops -= 1;
        *self.tx_counts.entry(packet.kind).or_insert(0) += 1;
        Ok(())
    }

    /// Broadcasts to every current neighbor; each copy arrives after the
    /// one-hop latency with `ttl_hops` decremented once.
    pub fn transmit(&mut self, sender: NodeId, mut packet: Packet) -> Result<Vec<(NodeId, f64)>, SimError> {
        self.count_tx(sender, &mut packet)?;
        if !self.alive[sender.index()] {
            return Ok(Vec::new());
        }
        let receivers: Vec<(NodeId, f64)> = self.links(sender).to_vec();
        if self.trace.packets_enabled() {
            let now = self.now();
            self.trace.record(
                now,
                Some(sender),
                "send",
                json!({"packet": packet.kind.as_str(), "to": "all", "receivers": receivers.len()}),
            );
        }
        if !receivers.is_empty() {
            let at = self.now() + self.latency;
            let d = Delivery {
                from: sender,
                receivers: receivers.clone(),
                packet: Rc::new(packet),
            };
            self.queue.schedule(Fired::Deliver(d), at)?;
        }
        Ok(receivers)
    }

    /// Sends to one neighbor. Returns `false` (nothing sent) when no link exists.
    pub fn unicast(&mut self, sender: NodeId, to: NodeId, mut packet: Packet) -> Result<bool, SimError> {
        self.check(to)?;
        if !self.in_link(sender, to) {
            return Ok(false);
        }
        self.count_tx(sender, &mut packet)?;
        let power = self
            .radio
            .received_power(self.positions[sender.index()].distance(&self.positions[to.index()]));
        if self.trace.packets_enabled() {
            let now = self.now();
            self.trace.record(
                now,
                Some(sender),
                "send",
                json!({"packet": packet.kind.as_str(), "to": to.0}),
            );
        }
        let at = self.now() + self.latency;
        let d = Delivery {
            from: sender,
            receivers: vec![(to, power)],
            packet: Rc::new(packet),
        };
        self.queue.schedule(Fired::Deliver(d), at)?;
        Ok(true)
    }

    pub fn record(&mut self, node: Option<NodeId>, kind: &str, detail: serde_json::Value) {
        let now = self.now();
        self.trace.record(now, node, kind, detail);
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Trace {
        let level = self.trace.level();
        std::mem::replace(&mut self.trace, Trace::new(level))
    }

    pub fn tx_counts(&self) -> &BTreeMap<PacketKind, u64> {
        &self.tx_counts
    }

    pub fn processed_events(&self) -> u64 {
        self.processed
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Processes every event with time `<= t` in order, then advances the
    /// clock to `t`. Deliveries to nodes that died in flight are discarded.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Kernel<E>, Fired<E>),
    {
        let start = self.processed;
        while let Some((_, ev)) = self.queue.pop_until(t) {
            self.processed += 1;
            let ev = match ev {
                Fired::Deliver(mut d) => {
                    let alive = &self.alive;
                    d.receivers.retain(|(n, _)| alive[n.index()]);
                    if d.receivers.is_empty() {
                        continue;
                    }
                    if self.trace.packets_enabled() {
                        let now = self.now();
                        for (n, p) in &d.receivers {
                            self.trace.record(
                                now,
                                Some(*n),
                                "recv",
                                json!({"packet": d.packet.kind.as_str(), "from": d.from.0, "power_w": p}),
                            );
                        }
                    }
                    Fired::Deliver(d)
                }
                timer => timer,
            };
            handler(self, ev);
        }
        self.queue.advance_to(t);
        self.processed - start
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{Payload, Routing};

    fn kernel(positions: &[(f64, f64)], range: f64) -> Kernel<u32> {
        let radio = RadioModel {
            range_m: range,
            ..RadioModel::default()
        };
        Kernel::new(
            1000.0,
            1000.0,
            radio,
            positions.iter().map(|&(x, y)| Position::new(x, y)).collect(),
            TraceLevel::Packet,
        )
        .unwrap()
    }

    fn hello(src: u32) -> Packet {
        Packet::new(
            NodeId(src),
            0,
            1,
            Routing::Broadcast,
            Payload::Hello {
                position: Position::default(),
                energy_left: 1.0,
                drain: 1.0,
            },
        )
    }

    /// Pairwise brute-force neighbor oracle.
    fn brute(positions: &[(f64, f64)], range: f64, i: usize) -> Vec<NodeId> {
        (0..positions.len())
            .filter(|&j| {
                j != i && {
                    let dx = positions[i].0 - positions[j].0;
                    let dy = positions[i].1 - positions[j].1;
                    dx * dx + dy * dy <= range * range
                }
            })
            .map(|j| NodeId(j as u32))
            .collect()
    }

    #[test]
    fn single_node_has_no_neighbors() {
        let k = kernel(&[(5.0, 5.0)], 100.0);
        assert!(k.neighbors(NodeId(0)).unwrap().is_empty());
        assert!(matches!(k.neighbors(NodeId(3)), Err(SimError::UnknownNode(_))));
    }

    #[test]
    fn boundary_is_inclusive() {
        let k = kernel(&[(0.0, 0.0), (100.0, 0.0)], 100.0);
        assert_eq!(k.neighbors(NodeId(0)).unwrap(), vec![NodeId(1)]);
        assert_eq!(k.neighbors(NodeId(1)).unwrap(), vec![NodeId(0)]);
    }

    #[test]
    fn three_on_a_line() {
        let pos = [(0.0, 10.0), (100.0, 10.0), (200.0, 10.0)];
        let k = kernel(&pos, 100.0);
        for i in 0..3 {
            assert_eq!(k.neighbors(NodeId(i as u32)).unwrap(), brute(&pos, 100.0, i));
        }
        assert_eq!(k.neighbors(NodeId(1)).unwrap().len(), 2);
    }

    #[test]
    fn transmit_power_law_and_counts() {
        let pos = [(0.0, 0.0), (1.0, 0.0), (10.0, 0.0), (20.0, 0.0), (900.0, 900.0)];
        let mut k = kernel(&pos, 50.0);
        let got = k.transmit(NodeId(0), hello(0)).unwrap();
        assert_eq!(
            got.iter().map(|r| r.0).collect::<Vec<_>>(),
            brute(&pos, 50.0, 0)
        );
        let tx = k.radio().tx_power_w;
        assert!((got[0].1 - tx).abs() < 1e-15);
        // d -> 2d divides power by 4 when n = 2.
        assert!((got[1].1 / got[2].1 - 4.0).abs() < 1e-12);
        let mut seen = 0;
        k.run_until(SimTime::from_secs(1.0), |_, ev| {
            if let Fired::Deliver(d) = ev {
                seen += d.receivers.len();
                assert_eq!(d.packet.ttl_hops, 0);
            }
        });
        assert_eq!(seen, 3);
        let sends = k.trace().events().iter().filter(|e| e.kind == "send").count();
        let recvs = k.trace().events().iter().filter(|e| e.kind == "recv").count();
        assert_eq!((sends, recvs), (1, 3));
        assert!(matches!(
            k.transmit(NodeId(0), {
                let mut p = hello(0);
                p.ttl_hops = 0;
                p
            }),
            Err(SimError::TtlExhausted(_))
        ));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut k = kernel(&[(0.0, 0.0)], 10.0);
        let n = k.run_until(SimTime::from_secs(3.0), |_, _| {});
        assert_eq!(n, 0);
        assert_eq!(k.now(), SimTime::from_secs(3.0));
        assert!(k.trace().is_empty());
    }

    #[test]
    fn timers_fire_in_order() {
        let mut k = kernel(&[(0.0, 0.0)], 10.0);
        k.schedule(1, SimTime::from_secs(5.0)).unwrap();
        k.schedule(2, SimTime::from_secs(5.0)).unwrap();
        let mut order = Vec::new();
        k.run_until(SimTime::from_secs(10.0), |k, ev| {
            if let Fired::Timer(x) = ev {
                assert_eq!(k.now(), SimTime::from_secs(5.0));
                order.push(x);
            }
        });
        assert_eq!(order, vec![1, 2]);
        assert!(k.schedule(3, SimTime::from_secs(4.0)).is_err());
    }

    #[test]
    fn unicast_requires_link() {
        let mut k = kernel(&[(0.0, 0.0), (5.0, 0.0), (500.0, 0.0)], 10.0);
        assert!(k.unicast(NodeId(0), NodeId(1), hello(0)).unwrap());
        assert!(!k.unicast(NodeId(0), NodeId(2), hello(0)).unwrap());
        k.kill(NodeId(1));
        assert!(!k.unicast(NodeId(0), NodeId(1), hello(0)).unwrap());
    }
}
