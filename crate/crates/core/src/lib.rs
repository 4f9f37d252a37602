//! Deterministic discrete-event simulator for large-scale multicast in mobile
//! ad hoc networks: zones with contacts, geographic rendezvous regions, sender
//! discovery servers and a mesh with one active upstream path per receiver.
//!
//! The crate is organised bottom-up: [`kernel`] (events, radio, trace),
//! protocol data structures ([`zone`], [`contacts`], [`rendezvous`],
//! [`multicast`], [`mobility`]), the protocol engine in [`sim`], and the
//! scenario harness ([`scenario`], [`harness`], [`metrics`]).

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod contacts;
pub mod error;
pub mod geo;
pub mod harness;
pub mod kernel;
pub mod metrics;
pub mod mobility;
pub mod multicast;
pub mod overlay;
pub mod packet;
pub mod rendezvous;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod zone;

pub use error::{OutputError, ScenarioError, SimError};
pub use geo::{Position, Rect};
pub use kernel::trace::{TraceEvent, TraceLevel};
pub use rendezvous::GroupAddress;
pub use scenario::Scenario;
pub use time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
