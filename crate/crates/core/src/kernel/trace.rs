use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::OutputError;
use crate::time::SimTime;
use crate::NodeId;

/// How much the kernel records. Protocol events are always kept because
/// metrics are derived from them; `Packet` additionally logs every send/receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    #[default]
    Protocol,
    Packet,
}

/// One trace line. Field order is fixed: `t`, `node`, `kind`, `detail`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: SimTime,
    pub node: Option<NodeId>,
    pub kind: String,
    pub detail: Value,
}

#[derive(Debug, Default, Clone)]
pub struct Trace {
    level: TraceLevel,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(level: TraceLevel) -> Self {
        Trace {
            level,
            events: Vec::new(),
        }
    }

    pub fn level(&self) -> TraceLevel {
        self.level
    }

    pub fn packets_enabled(&self) -> bool {
        self.level >= TraceLevel::Packet
    }

    pub fn record(&mut self, t: SimTime, node: Option<NodeId>, kind: &str, detail: Value) {
        self.events.push(TraceEvent {
            t,
            node,
            kind: kind.to_string(),
            detail,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

pub fn write_jsonl<W: Write>(events: &[TraceEvent], mut w: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl_string(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    write_jsonl(events, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceEvent>, OutputError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| OutputError::Io {
            path: "<trace>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|source| OutputError::Trace {
            line: i + 1,
            source,
        })?;
        out.push(ev);
    }
    Ok(out)
}
