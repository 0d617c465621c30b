//! `hifdet` command line: scenario runs, Monte Carlo batches and the
//! individual simulate / estimate / detect stages.
//!
//! Exit codes: 0 ran, 2 configuration error, 3 numerical failure, 1 other
//! (I/O).

use clap::{Args, Parser, Subcommand};
use hifdet::analytics::two_step_pipeline;
use hifdet::error::{Error, Result};
use hifdet::estimator::{wls_estimate, WeightingStep};
use hifdet::network::NetworkTopology;
use hifdet::report::{mc_summary_line, measurement_rows, summary_line, write_monte_carlo, write_run};
use hifdet::scenario::{builtin_network, builtin_scenario, describe, list_builtins, run_monte_carlo, run_scenario, ResolvedScenario, ScenarioConfig};
use hifdet::sim::{run_timeline, MeasurementSet};
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hifdet", version, about = "High-impedance fault detection through per-phase WLS state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the measurement timeline of a scenario.
    Simulate(Common),
    /// Step-1 (or step-2) WLS estimate of one snapshot.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: SnapshotInput,
        /// Weighting step: 1 (fraction of reading) or 2 (meter precision).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        step: u8,
    },
    /// Chi-square test, ranking and classification of one snapshot.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: SnapshotInput,
    },
    /// Full pipeline over the scenario timeline.
    Run(Common),
    /// Repeat the scenario with derived noise seeds.
    MonteCarlo(Common),
    /// Bus, branch and measurement plan summary of a network.
    Describe {
        /// Builtin network name or network file.
        network: String,
    },
    /// Builtin networks and scenarios.
    List,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML) or builtin scenario name.
    scenario: String,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Base noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Noise deviation as a fraction of each true value.
    #[arg(long)]
    noise: Option<f64>,
    /// Chi-square confidence level.
    #[arg(long)]
    p: Option<f64>,
    /// CME^N identification threshold.
    #[arg(long)]
    beta: Option<f64>,
    /// Shoulder resistance of the fault, ohms.
    #[arg(long)]
    r_shoulder: Option<f64>,
    /// Monte Carlo run count.
    #[arg(long)]
    runs: Option<usize>,
    /// Monte Carlo worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SnapshotInput {
    /// Measurement CSV as written by `simulate`; simulated when absent.
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Snapshot index.
    #[arg(long, default_value_t = 0)]
    snapshot: usize,
}

impl Common {
    fn config(&self) -> Result<ScenarioConfig> {
        let path = Path::new(&self.scenario);
        let mut cfg = if path.exists() { ScenarioConfig::load(path)? } else { builtin_scenario(&self.scenario)? };
        if let Some(v) = self.seed {
            cfg.timeline.base_seed = v;
        }
        if let Some(v) = self.noise {
            cfg.timeline.noise_fraction = v;
        }
        if let Some(v) = self.p {
            cfg.detection.p = v;
        }
        if let Some(v) = self.beta {
            cfg.detection.beta = v;
        }
        if let Some(v) = self.r_shoulder {
            match cfg.fault.as_mut() {
                Some(f) => f.r_shoulder_ohm = v,
                None => return Err(Error::config("fault.r_shoulder_ohm", "scenario has no fault")),
            }
        }
        if let Some(v) = self.runs {
            cfg.monte_carlo.runs = v;
        }
        if let Some(v) = self.workers {
            cfg.monte_carlo.workers = v;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output_dir(cfg: &ScenarioConfig) -> Option<PathBuf> {
    cfg.output_dir.clone()
}

#[derive(Deserialize)]
struct MeasurementCsvRow {
    snapshot: usize,
    index: usize,
    source: String,
    truth: f64,
    value: f64,
    sigma: f64,
}

/// Real measurements of one snapshot, aligned with the scenario plan.
fn read_snapshot(path: &Path, snapshot: usize, sc: &ResolvedScenario, period_s: f64) -> Result<MeasurementSet> {
    let field = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::config(&field, e.to_string()))?;
    let mut rows = Vec::new();
    for row in reader.deserialize::<MeasurementCsvRow>() {
        let row = row.map_err(|e| Error::config(&field, e.to_string()))?;
        if row.snapshot == snapshot && row.source == "real" {
            rows.push(row);
        }
    }
    rows.sort_by_key(|r| r.index);
    let n = sc.plan.len();
    if rows.len() != n || rows.iter().enumerate().any(|(i, r)| r.index != i) {
        return Err(Error::config(field, format!("snapshot {snapshot}: expected measurements 0..{n} of the scenario plan, found {}", rows.len())));
    }
    Ok(MeasurementSet {
        timestamp_s: snapshot as f64 * period_s,
        values: rows.iter().map(|r| r.value).collect(),
        truth: rows.iter().map(|r| r.truth).collect(),
        noise_sigma: rows.iter().map(|r| r.sigma).collect(),
        sm_timestamp_s: vec![None; n],
    })
}

fn snapshot_input(cfg: &ScenarioConfig, sc: &ResolvedScenario, input: &SnapshotInput) -> Result<MeasurementSet> {
    match &input.measurements {
        Some(path) => read_snapshot(path, input.snapshot, sc, sc.timeline.snapshot_period_s),
        None => {
            let snaps = run_timeline(&sc.topology, &sc.plan, sc.fault.as_ref(), &sc.timeline)?;
            let count = snaps.len();
            snaps
                .into_iter()
                .nth(input.snapshot)
                .map(|s| s.measurements)
                .ok_or_else(|| Error::config("snapshot", format!("{}: timeline of '{}' has {count} snapshots", input.snapshot, cfg.name)))
        }
    }
}

fn write_json<T: serde::Serialize>(dir: Option<PathBuf>, name: &str, value: &T) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::List => {
            for line in list_builtins() {
                println!("{line}");
            }
        }
        Command::Describe { network } => {
            let path = Path::new(&network);
            let topology = if path.exists() { NetworkTopology::load(path)? } else { builtin_network(&network)? };
            print!("{}", describe(&topology)?);
        }
        Command::Simulate(common) => {
            let cfg = common.config()?;
            let sc = cfg.resolve()?;
            let snaps = run_timeline(&sc.topology, &sc.plan, sc.fault.as_ref(), &sc.timeline)?;
            if let Some(dir) = output_dir(&cfg) {
                fs::create_dir_all(&dir)?;
                let mut w = csv::Writer::from_path(dir.join("measurements.csv"))?;
                for s in &snaps {
                    for row in measurement_rows(s.index, &sc.plan, &s.measurements) {
                        w.serialize(row)?;
                    }
                }
                w.flush()?;
            }
            let line = serde_json::json!({
                "scenario": cfg.name,
                "seed": sc.timeline.base_seed,
                "snapshots": snaps.len(),
                "measurements": sc.plan.len(),
            });
            println!("{line}");
        }
        Command::Estimate { common, input, step } => {
            let cfg = common.config()?;
            let sc = cfg.resolve()?;
            let set = snapshot_input(&cfg, &sc, &input)?;
            let weighting = match step {
                1 => WeightingStep::One {
                    fraction: sc.pipeline.step1_fraction,
                },
                _ => WeightingStep::two(sc.pipeline.precision),
            };
            let est = wls_estimate(&sc.topology, &sc.plan, &set, &weighting, None)?;
            write_json(output_dir(&cfg), "estimate.json", &est)?;
            let phases: Vec<_> = est
                .phases
                .iter()
                .map(|p| serde_json::json!({ "phase": p.phase.to_string(), "objective": p.objective, "iterations": p.iterations }))
                .collect();
            println!("{}", serde_json::json!({ "scenario": cfg.name, "snapshot": input.snapshot, "step": step, "phases": phases }));
        }
        Command::Detect { common, input } => {
            let cfg = common.config()?;
            let sc = cfg.resolve()?;
            let set = snapshot_input(&cfg, &sc, &input)?;
            let outcome = two_step_pipeline(&sc.topology, &sc.plan, &set, &sc.pipeline, None)?;
            write_json(output_dir(&cfg), "report.json", &outcome.report)?;
            let tests: Vec<_> = outcome
                .report
                .tests
                .iter()
                .map(|t| serde_json::json!({ "phase": t.phase.to_string(), "J": t.j, "threshold": t.threshold, "detected": t.detected }))
                .collect();
            let findings: Vec<_> = outcome
                .report
                .findings
                .iter()
                .map(|f| serde_json::json!({ "phase": f.phase.to_string(), "verdict": f.classification.verdict.name(), "suspected_bus": f.classification.verdict.suspected_bus() }))
                .collect();
            println!(
                "{}",
                serde_json::json!({ "scenario": cfg.name, "snapshot": input.snapshot, "detected": outcome.report.detected(), "tests": tests, "findings": findings })
            );
        }
        Command::Run(common) => {
            let cfg = common.config()?;
            let run = run_scenario(&cfg)?;
            if let Some(dir) = output_dir(&cfg) {
                write_run(&run, &dir)?;
            }
            println!("{}", summary_line(&run.summary));
        }
        Command::MonteCarlo(common) => {
            let cfg = common.config()?;
            let mc = run_monte_carlo(&cfg)?;
            if let Some(dir) = output_dir(&cfg) {
                write_monte_carlo(&mc, &dir)?;
            }
            println!("{}", mc_summary_line(&mc));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                ref e if e.is_config() => 2,
                Error::Io(_) => 1,
                _ => 3,
            })
        }
    }
}
