use std::path::PathBuf;

use thiserror::Error;

use crate::time::SimTime;
use crate::NodeId;

/// Fatal errors raised by the simulation kernel and protocol layers.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but clock is already at {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node {0} tried to transmit a packet with no hops left")]
    TtlExhausted(NodeId),
}

/// Errors from loading or validating a scenario file.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("{0}")]
    InvalidNoLine(String),
}

/// Errors from writing run artifacts or reading saved traces.
#[derive(Debug, Error)]
pub enum OutputError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace line {line}: {source}")]
    Trace {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}
