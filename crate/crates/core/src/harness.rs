//! Experiment orchestration: single runs, parameter sweeps and offline stats.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::error::{OutputError, ScenarioError, SimError};
use crate::kernel::trace::{read_jsonl, write_jsonl, TraceEvent};
use crate::metrics::MetricsReport;
use crate::scenario::{set_param, Scenario};
use crate::sim::World;
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

impl HarnessError {
    /// Process exit code: 1 for configuration problems, 2 for everything at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Scenario(_) => 1,
            HarnessError::Sim(SimError::Config(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceEvent>,
    pub report: MetricsReport,
}

/// Runs `s` to its duration (or `until`, if earlier) and derives metrics from the trace.
pub fn run_scenario(s: &Scenario, until: Option<f64>) -> Result<RunOutput, SimError> {
    let mut w = World::new(s)?;
    let end = until.map_or(s.duration_s, |u| u.min(s.duration_s));
    w.run_until(SimTime::from_secs(end))?;
    let trace = w.finish();
    let report = MetricsReport::from_trace(&trace);
    Ok(RunOutput { trace, report })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `metrics.csv`, `trace.jsonl` and `scenario_resolved.toml` into `out`.
pub fn emit(s: Option<&Scenario>, run: &RunOutput, out: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_metrics(&run.report, run.trace.is_empty(), out)?;
    let p = out.join("trace.jsonl");
    let f = fs::File::create(&p).map_err(io_err(&p))?;
    write_jsonl(&run.trace, std::io::BufWriter::new(f)).map_err(io_err(&p))?;
    if let Some(s) = s {
        let p = out.join("scenario_resolved.toml");
        fs::write(&p, s.to_toml_string()).map_err(io_err(&p))?;
    }
    Ok(())
}

fn write_metrics(r: &MetricsReport, empty: bool, out: &Path) -> Result<(), OutputError> {
    let p = out.join("metrics.csv");
    let f = fs::File::create(&p).map_err(io_err(&p))?;
    r.write_csv(f, empty).map_err(io_err(&p))
}

/// Recomputes metrics from a saved trace.
pub fn stats(trace_path: &Path, out: &Path) -> Result<MetricsReport, OutputError> {
    let f = fs::File::open(trace_path).map_err(io_err(trace_path))?;
    let trace = read_jsonl(std::io::BufReader::new(f))?;
    let report = MetricsReport::from_trace(&trace);
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_metrics(&report, trace.is_empty(), out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
}

/// Expands `key=v1,v2,...` over `seeds` consecutive seeds from the scenario's own.
pub fn sweep_points(base: &str, key: &str, values: &[String], seeds: u64, out: &Path) -> Result<Vec<(SweepPoint, Scenario)>, ScenarioError> {
    let doc: toml::Table = toml::from_str(base).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let base_seed = Scenario::from_toml_str(base)?.seed;
    let mut pts = Vec::new();
    for v in values {
        for i in 0..seeds {
            let mut d = doc.clone();
            set_param(&mut d, key, v)?;
            let seed = base_seed.wrapping_add(i);
            set_param(&mut d, "seed", &seed.to_string())?;
            let text = toml::to_string(&d).map_err(|e| ScenarioError::Parse(e.to_string()))?;
            let s = Scenario::from_toml_str(&text)?;
            let dir = out.join(format!("{key}={v}")).join(format!("seed_{seed}"));
            pts.push((
                SweepPoint {
                    value: v.clone(),
                    seed,
                    dir,
                },
                s,
            ));
        }
    }
    Ok(pts)
}

/// Runs every sweep point in parallel, then writes per-run artifacts and a
/// combined `sweep.csv` (`param,value,seed,metric,key,metric_value`) sequentially.
pub fn sweep(base: &str, key: &str, values: &[String], seeds: u64, out: &Path) -> Result<usize, HarnessError> {
    let pts = sweep_points(base, key, values, seeds, out)?;
    let runs: Vec<Result<RunOutput, SimError>> = pts.par_iter().map(|(_, s)| run_scenario(s, None)).collect();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut combined = String::from("param,value,seed,metric,key,metric_value\n");
    for ((pt, s), run) in pts.iter().zip(runs) {
        let run = run?;
        emit(Some(s), &run, &pt.dir)?;
        for (m, k, v) in run.report.rows() {
            combined.push_str(&format!("{key},{},{},{m},{k},{v}\n", pt.value, pt.seed));
        }
    }
    let p = out.join("sweep.csv");
    fs::write(&p, combined).map_err(io_err(&p))?;
    Ok(pts.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_cover_values_and_seeds() {
        let base = Scenario::minimal(10, 200.0, 200.0, 5.0, 40).to_toml_string();
        let vals = vec!["1".to_string(), "3".to_string()];
        let pts = sweep_points(&base, "zone.radius_R", &vals, 2, Path::new("out")).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3].1.zone.radius, 3);
        assert_eq!(pts[3].1.seed, 41);
        assert_eq!(pts[0].0.dir, Path::new("out/zone.radius_R=1/seed_40"));
    }

    #[test]
    fn sweep_rejects_unknown_key() {
        let base = Scenario::minimal(10, 200.0, 200.0, 5.0, 1).to_toml_string();
        let r = sweep_points(&base, "zone.no_such", &["1".into()], 1, Path::new("o"));
        assert!(r.is_err());
    }
}
