//! Scenario files: TOML with every block optional except the basics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contacts::ContactConfig;
use crate::error::{ScenarioError, SimError};
use crate::geo::Rect;
use crate::kernel::{RadioModel, TraceLevel};
use crate::mobility::MobilityConfig;
use crate::multicast::McastConfig;
use crate::rendezvous::{AddressGrid, GroupAddress, RrConfig};
use crate::zone::ZoneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Area {
    pub width_m: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    #[default]
    Uniform,
    /// Row-major square-ish lattice filling the area.
    Lattice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPosition {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Placement {
    pub mode: PlacementMode,
    /// Nodes pinned to explicit coordinates; the rest follow `mode`.
    pub fixed: Vec<FixedPosition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub initial_j: f64,
    /// Per-node drain is drawn uniformly from `[drain_min_w, drain_max_w]`.
    pub drain_min_w: f64,
    pub drain_max_w: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            initial_j: 1000.0,
            drain_min_w: 0.5,
            drain_max_w: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub level: TraceLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebugConfig {
    /// Check the mesh invariants after every processed event.
    pub invariant_sweep: bool,
}

/// One timed workload entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Directive {
    RegisterSession {
        at_s: f64,
        node: u32,
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        requested: Option<GroupAddress>,
    },
    StartSender {
        at_s: f64,
        node: u32,
        group: GroupAddress,
    },
    SendData {
        at_s: f64,
        node: u32,
        group: GroupAddress,
        rate_hz: f64,
        count: u32,
        #[serde(default = "default_size")]
        size_bytes: u32,
    },
    Join {
        at_s: f64,
        node: u32,
        group: GroupAddress,
    },
    Leave {
        at_s: f64,
        node: u32,
        group: GroupAddress,
    },
    FailNode {
        at_s: f64,
        node: u32,
    },
    /// Fails every node inside `rect`.
    Partition {
        at_s: f64,
        rect: Rect,
    },
    /// Background route discovery: random origin/target pairs issue bordercast
    /// queries as one network-wide Poisson process of rate `rate_hz`.
    RouteQueries {
        at_s: f64,
        until_s: f64,
        rate_hz: f64,
        #[serde(default = "default_rounds")]
        rounds: u32,
    },
    Bootstrap {
        at_s: f64,
        node: u32,
    },
}

fn default_size() -> u32 {
    512
}

fn default_rounds() -> u32 {
    1
}

impl Directive {
    pub fn at_s(&self) -> f64 {
        match self {
            Directive::RegisterSession { at_s, .. }
            | Directive::StartSender { at_s, .. }
            | Directive::SendData { at_s, .. }
            | Directive::Join { at_s, .. }
            | Directive::Leave { at_s, .. }
            | Directive::FailNode { at_s, .. }
            | Directive::Partition { at_s, .. }
            | Directive::RouteQueries { at_s, .. }
            | Directive::Bootstrap { at_s, .. } => *at_s,
        }
    }

    fn node(&self) -> Option<u32> {
        match self {
            Directive::RegisterSession { node, .. }
            | Directive::StartSender { node, .. }
            | Directive::SendData { node, .. }
            | Directive::Join { node, .. }
            | Directive::Leave { node, .. }
            | Directive::FailNode { node, .. }
            | Directive::Bootstrap { node, .. } => Some(*node),
            Directive::Partition { .. } | Directive::RouteQueries { .. } => None,
        }
    }

    fn group(&self) -> Option<GroupAddress> {
        match self {
            Directive::RegisterSession { requested, .. } => *requested,
            Directive::StartSender { group, .. }
            | Directive::SendData { group, .. }
            | Directive::Join { group, .. }
            | Directive::Leave { group, .. } => Some(*group),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_s: f64,
    pub node_count: usize,
    pub area: Area,
    #[serde(default)]
    pub radio: RadioModel,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub mobility: MobilityConfig,
    #[serde(default)]
    pub zone: ZoneConfig,
    #[serde(default)]
    pub contacts: ContactConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub rr: RrConfig,
    #[serde(default)]
    pub mcast: McastConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub debug: DebugConfig,
    #[serde(default)]
    pub workload: Vec<Directive>,
}

impl Scenario {
    /// A scenario with every block at its default and no workload.
    pub fn minimal(node_count: usize, width_m: f64, height_m: f64, duration_s: f64, seed: u64) -> Self {
        Scenario {
            seed,
            duration_s,
            node_count,
            area: Area { width_m, height_m },
            radio: RadioModel::default(),
            placement: Placement::default(),
            mobility: MobilityConfig::default(),
            zone: ZoneConfig::default(),
            contacts: ContactConfig::default(),
            energy: EnergyConfig::default(),
            rr: RrConfig::default(),
            mcast: McastConfig::default(),
            trace: TraceConfig::default(),
            debug: DebugConfig::default(),
            workload: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate_with_source(Some(text))?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Defaults-expanded form; loading it back yields an equal scenario.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario is always representable as TOML")
    }

    pub fn grid(&self) -> Result<AddressGrid, SimError> {
        AddressGrid::new(
            self.area.width_m,
            self.area.height_m,
            self.rr.grid_cols,
            self.rr.grid_rows,
            self.rr.prefix_bits,
            self.rr.suffix_bits,
        )
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.validate_with_source(None)
    }

    fn validate_with_source(&self, source: Option<&str>) -> Result<(), ScenarioError> {
        let plain = |e: SimError| match e {
            SimError::Config(m) => ScenarioError::InvalidNoLine(m),
            other => ScenarioError::InvalidNoLine(other.to_string()),
        };
        if !(self.area.width_m > 0.0 && self.area.height_m > 0.0) {
            return Err(at_key(source, "area", "area must have positive width and height"));
        }
        if self.node_count == 0 || self.node_count > u32::MAX as usize {
            return Err(at_key(source, "node_count", "node_count must be >= 1"));
        }
        if !(self.duration_s > 0.0) {
            return Err(at_key(source, "duration_s", "duration_s must be > 0"));
        }
        self.radio.validate().map_err(plain)?;
        self.mobility.validate().map_err(plain)?;
        self.zone.validate().map_err(plain)?;
        self.contacts.validate().map_err(plain)?;
        self.rr.validate().map_err(plain)?;
        self.mcast.validate().map_err(plain)?;
        let e = &self.energy;
        if !(e.initial_j >= 0.0) || !(e.drain_min_w > 0.0) || !(e.drain_max_w >= e.drain_min_w) {
            return Err(ScenarioError::InvalidNoLine(
                "energy needs initial_j >= 0 and 0 < drain_min_w <= drain_max_w".into(),
            ));
        }
        let grid = self.grid().map_err(plain)?;
        for f in &self.placement.fixed {
            if f.id as usize >= self.node_count {
                return Err(ScenarioError::InvalidNoLine(format!(
                    "placement.fixed id {} >= node_count {}",
                    f.id, self.node_count
                )));
            }
            if !(0.0..=self.area.width_m).contains(&f.x) || !(0.0..=self.area.height_m).contains(&f.y) {
                return Err(ScenarioError::InvalidNoLine(format!(
                    "placement.fixed id {} lies outside the area",
                    f.id
                )));
            }
        }
        for (i, d) in self.workload.iter().enumerate() {
            let fail = |message: String| match source.and_then(|s| workload_line(s, i)) {
                Some(line) => ScenarioError::Invalid { line, message },
                None => ScenarioError::InvalidNoLine(format!("workload[{i}]: {message}")),
            };
            let t = d.at_s();
            if !(t >= 0.0) || t > self.duration_s {
                return Err(fail(format!(
                    "directive time {t} is outside [0, duration_s = {}]",
                    self.duration_s
                )));
            }
            if let Some(n) = d.node() {
                if n as usize >= self.node_count {
                    return Err(fail(format!("node {n} >= node_count {}", self.node_count)));
                }
            }
            if let Some(g) = d.group() {
                if g.prefix >= grid.region_count() || g.suffix > grid.max_suffix() {
                    return Err(fail(format!("group {g} is not a valid address for this grid")));
                }
            }
            match d {
                Directive::SendData { rate_hz, .. } if !(*rate_hz > 0.0) => {
                    return Err(fail("send_data.rate_hz must be > 0".into()));
                }
                Directive::RouteQueries {
                    until_s, rate_hz, rounds, ..
                } => {
                    if !(*rate_hz > 0.0) || *until_s < t || *until_s > self.duration_s || *rounds == 0 {
                        return Err(fail(
                            "route_queries needs rate_hz > 0, rounds >= 1 and at_s <= until_s <= duration_s".into(),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Line (1-based) of the `index`-th `[[workload]]` header.
fn workload_line(source: &str, index: usize) -> Option<usize> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| l.trim() == "[[workload]]")
        .nth(index)
        .map(|(n, _)| n + 1)
}

fn at_key(source: Option<&str>, key: &str, message: &str) -> ScenarioError {
    let line = source.and_then(|s| {
        s.lines().position(|l| {
            let l = l.trim_start();
            l.starts_with(key) && l[key.len()..].trim_start().starts_with(['=', ']'])
                || l == format!("[{key}]")
        })
    });
    match line {
        Some(n) => ScenarioError::Invalid {
            line: n + 1,
            message: message.to_string(),
        },
        None => ScenarioError::InvalidNoLine(message.to_string()),
    }
}

/// Overrides one dotted key (e.g. `zone.radius_R`) in a parsed scenario document.
/// The value is read as TOML (`3`, `0.5`, `true`, `"x"`), falling back to a bare string.
pub fn set_param(doc: &mut toml::Table, key: &str, raw: &str) -> Result<(), ScenarioError> {
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ScenarioError::InvalidNoLine(format!("empty parameter key '{key}'")))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ScenarioError::InvalidNoLine(format!("'{p}' in '{key}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\nduration_s = 10.0\nnode_count = 5\n[area]\nwidth_m = 100.0\nheight_m = 100.0\n";

    #[test]
    fn minimal_file_gets_defaults() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s, Scenario::minimal(5, 100.0, 100.0, 10.0, 7));
        assert_eq!(s.zone.radius, 2);
        assert_eq!(s.rr.target_sds, 5);
    }

    #[test]
    fn directive_after_duration_is_rejected_with_line() {
        let text = format!(
            "{MINIMAL}\n[[workload]]\naction = \"fail_node\"\nat_s = 1.0\nnode = 0\n\n[[workload]]\naction = \"fail_node\"\nat_s = 11.0\nnode = 1\n"
        );
        match Scenario::from_toml_str(&text) {
            Err(ScenarioError::Invalid { line, .. }) => assert_eq!(line, 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Scenario::from_toml_str(&format!("{MINIMAL}bogus = 1\n")).is_err());
        let text = format!("{MINIMAL}[zone]\nradius_R = 2\nwhatever = 3\n");
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}[[workload]]\naction = \"fail_node\"\nat_s = 1.0\nnode = 0\nextra = 1\n");
        assert!(Scenario::from_toml_str(&text).is_err());
    }

    #[test]
    fn round_trip() {
        let mut s = Scenario::from_toml_str(MINIMAL).unwrap();
        s.workload.push(Directive::Join {
            at_s: 2.0,
            node: 1,
            group: GroupAddress::new(3, 4),
        });
        s.workload.push(Directive::Partition {
            at_s: 3.0,
            rect: Rect::new(0.0, 10.0, 0.0, 10.0),
        });
        s.placement.fixed.push(FixedPosition { id: 0, x: 1.0, y: 2.0 });
        let text = s.to_toml_string();
        let back = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn set_param_overrides_nested_key() {
        let mut doc: toml::Table = toml::from_str(MINIMAL).unwrap();
        set_param(&mut doc, "zone.radius_R", "3").unwrap();
        set_param(&mut doc, "seed", "9").unwrap();
        let s: Scenario = doc.try_into().unwrap();
        assert_eq!(s.zone.radius, 3);
        assert_eq!(s.seed, 9);
    }
}
