use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcastsim::harness::{self, HarnessError};
use mcastsim::{Scenario, TraceLevel};

#[derive(Parser)]
#[command(name = "mcastsim", version, about = "Multicast MANET simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write metrics.csv, trace.jsonl and scenario_resolved.toml.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Log every packet send/receive in the trace.
        #[arg(long)]
        trace: bool,
        /// Stop early at this simulated time (seconds).
        #[arg(long)]
        until: Option<f64>,
    },
    /// Run a scenario over parameter values and seeds.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// `key=v1,v2,...` with a dotted key, e.g. `zone.radius_R=1,2,3`.
        #[arg(long)]
        param: String,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a saved trace.
    Stats {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            trace,
            until,
        } => {
            let mut s = Scenario::load(&scenario)?;
            s.seed = seed;
            if trace {
                s.trace.level = TraceLevel::Packet;
            }
            log::info!("running {} nodes for {} s", s.node_count, s.duration_s);
            let r = harness::run_scenario(&s, until)?;
            harness::emit(Some(&s), &r, &out)?;
            log::info!("{} trace events written to {}", r.trace.len(), out.display());
        }
        Cmd::Sweep {
            scenario,
            param,
            seeds,
            out,
        } => {
            let text = std::fs::read_to_string(&scenario).map_err(|source| mcastsim::ScenarioError::Read {
                path: scenario.clone(),
                source,
            })?;
            let (key, vals) = param
                .split_once('=')
                .ok_or_else(|| mcastsim::ScenarioError::InvalidNoLine(format!("--param '{param}' is not key=v1,v2")))?;
            let vals: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
            let n = harness::sweep(&text, key, &vals, seeds, &out)?;
            log::info!("{n} runs written to {}", out.display());
        }
        Cmd::Stats { trace, out } => {
            harness::stats(&trace, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCASTSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
