//! Scenario configuration, the per-snapshot detection run and Monte Carlo
//! batches.

use crate::analytics::{
    generate_synthetic, synthetic_quota, two_step_pipeline, vi_scores, DofConvention, PipelineConfig,
    PipelineOutcome, Verdict,
};
use crate::error::{Error, Result};
use crate::estimator::PhaseState;
use crate::hif::{DiodePair, HifScenario, IntermittencyWindow, RfProfile};
use crate::network::{
    builtin_baran_wu_33, default_measurement_plan, full_measurement_plan, BusId, MeasurementPlan,
    MeterPrecision, NetworkTopology, Phase,
};
use crate::sim::{fault_stage, run_timeline, upstream_branch, FaultStage, MeasurementSet, NoiseModel, TimelineConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BUILTIN_NETWORKS: &[&str] = &["baran-wu-33"];
pub const BUILTIN_SCENARIOS: &[&str] = &["bus20-A", "bus10-B", "bus28-C", "no-fault"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSource {
    /// Embedded network name.
    pub builtin: Option<String>,
    /// Network file (TOML or JSON); relative to the config file.
    pub file: Option<PathBuf>,
    /// Measurement plan file; defaults to the full plan.
    pub plan_file: Option<PathBuf>,
}

impl Default for NetworkSource {
    fn default() -> Self {
        Self {
            builtin: Some("baran-wu-33".into()),
            file: None,
            plan_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntermittencyConfig {
    /// Relative to fault start.
    pub t_on_s: f64,
    pub t_off_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub bus: BusId,
    pub phase: Phase,
    pub t_start_s: f64,
    pub duration_s: f64,
    pub r_start_ohm: f64,
    pub r_shoulder_ohm: f64,
    pub buildup_s: f64,
    /// Exponent of the default `(1 - s)^n` build-up shape.
    #[serde(default = "default_order")]
    pub profile_order: u32,
    /// `(s, ohm)` points with `s` in `[0, 1]`; replaces the default shape
    /// with a least-squares polynomial of `poly_degree`.
    pub control_points: Option<Vec<[f64; 2]>>,
    pub poly_degree: Option<usize>,
    pub r_open_ohm: Option<f64>,
    pub v_p_volts: f64,
    pub v_n_volts: f64,
    pub intermittency: Option<IntermittencyConfig>,
}

fn default_order() -> u32 {
    4
}

impl FaultConfig {
    pub fn lateral(bus: BusId, phase: Phase, r_shoulder_ohm: f64) -> Self {
        Self {
            bus,
            phase,
            t_start_s: 0.5,
            duration_s: 1.0,
            r_start_ohm: 20e3,
            r_shoulder_ohm,
            buildup_s: 0.5,
            profile_order: 4,
            control_points: None,
            poly_degree: None,
            r_open_ohm: None,
            v_p_volts: 2000.0,
            v_n_volts: 2600.0,
            intermittency: None,
        }
    }

    pub fn to_scenario(&self) -> Result<HifScenario> {
        let wrap = |e: Error| Error::config("fault", e.to_string());
        let mut rf = match &self.control_points {
            Some(points) => {
                let pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
                let degree = self.poly_degree.unwrap_or(pts.len().saturating_sub(1).min(6));
                RfProfile::from_control_points(&pts, degree, self.buildup_s).map_err(wrap)?
            }
            None => RfProfile::power_law(self.r_start_ohm, self.r_shoulder_ohm, self.buildup_s, self.profile_order)
                .map_err(wrap)?,
        };
        if let Some(r) = self.r_open_ohm {
            rf.r_open_ohm = r;
        }
        if let Some(w) = self.intermittency {
            rf.intermittency = Some(IntermittencyWindow {
                t_on_s: w.t_on_s,
                t_off_s: w.t_off_s,
            });
        }
        let sc = HifScenario {
            bus: self.bus,
            phase: self.phase,
            t_start_s: self.t_start_s,
            duration_s: self.duration_s,
            rf,
            diodes: DiodePair {
                v_p: self.v_p_volts,
                v_n: self.v_n_volts,
            },
        };
        sc.validate().map_err(wrap)?;
        Ok(sc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimelineSection {
    pub snapshot_period_s: f64,
    pub window_s: f64,
    pub base_seed: u64,
    /// Noise deviation as a fraction of each true value; zero disables.
    pub noise_fraction: f64,
}

impl Default for TimelineSection {
    fn default() -> Self {
        let t = TimelineConfig::default();
        Self {
            snapshot_period_s: t.snapshot_period_s,
            window_s: t.window_s,
            base_seed: t.base_seed,
            noise_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    pub p: f64,
    pub beta: f64,
    pub dof: DofConvention,
    /// Step-1 deviation as a fraction of each measured value.
    pub step1_fraction: f64,
}

impl Default for DetectionSection {
    fn default() -> Self {
        let c = PipelineConfig::default();
        Self {
            p: c.p,
            beta: c.beta,
            dof: c.dof,
            step1_fraction: c.step1_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionSection {
    pub flow_pu: f64,
    pub injection_pu: f64,
    pub voltage_pu: f64,
    pub synthetic_pu: f64,
    /// Floor as a fraction of the reading.
    pub reading_class: f64,
}

impl Default for PrecisionSection {
    fn default() -> Self {
        let m = MeterPrecision::default();
        Self {
            flow_pu: m.flow,
            injection_pu: m.injection,
            voltage_pu: m.voltage,
            synthetic_pu: m.synthetic,
            reading_class: m.reading_class,
        }
    }
}

impl PrecisionSection {
    pub fn meter(&self) -> MeterPrecision {
        MeterPrecision {
            flow: self.flow_pu,
            injection: self.injection_pu,
            voltage: self.voltage_pu,
            synthetic: self.synthetic_pu,
            reading_class: self.reading_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub enabled: bool,
    /// Redundancy restored with synthetic injections after plan pruning.
    pub target_grl: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            enabled: true,
            target_grl: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub runs: usize,
    /// Worker threads; zero uses every core.
    pub workers: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self { runs: 100, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub network: NetworkSource,
    pub fault: Option<FaultConfig>,
    #[serde(default)]
    pub timeline: TimelineSection,
    #[serde(default)]
    pub detection: DetectionSection,
    #[serde(default)]
    pub precision: PrecisionSection,
    #[serde(default)]
    pub synthetic: SyntheticSection,
    #[serde(default)]
    pub monte_carlo: MonteCarloSection,
    pub output_dir: Option<PathBuf>,
    /// Directory relative paths are resolved against; set when loading.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Everything a run needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub name: String,
    pub topology: NetworkTopology,
    pub plan: MeasurementPlan,
    pub fault: Option<HifScenario>,
    pub timeline: TimelineConfig,
    pub pipeline: PipelineConfig,
    pub synthetic: SyntheticSection,
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, fault: Option<FaultConfig>) -> Self {
        Self {
            name: name.into(),
            network: NetworkSource::default(),
            fault,
            timeline: TimelineSection::default(),
            detection: DetectionSection::default(),
            precision: PrecisionSection::default(),
            synthetic: SyntheticSection::default(),
            monte_carlo: MonteCarloSection::default(),
            output_dir: None,
            base_dir: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("scenario", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn topology(&self) -> Result<NetworkTopology> {
        match (&self.network.builtin, &self.network.file) {
            (Some(_), Some(_)) => Err(Error::config("network", "set either builtin or file, not both")),
            (Some(name), None) => builtin_network(name),
            (None, Some(file)) => {
                let path = self.path(file);
                NetworkTopology::load(&path).map_err(|e| Error::config("network.file", e.to_string()))
            }
            (None, None) => Err(Error::config("network", "missing builtin or file")),
        }
    }

    pub fn resolve(&self) -> Result<ResolvedScenario> {
        let topology = self.topology()?;
        topology
            .validate_full()
            .map_err(|e| Error::config("network", e.to_string()))?;
        let precision = self.precision.meter();
        precision
            .validate()
            .map_err(|e| Error::config("precision", e.to_string()))?;
        let plan = match &self.network.plan_file {
            Some(file) => {
                let path = self.path(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::config("network.plan_file", e.to_string()))?;
                MeasurementPlan::from_toml_str(&text).map_err(|e| Error::config("network.plan_file", e.to_string()))?
            }
            None => full_measurement_plan(&topology, &precision),
        };
        plan.validate(&topology)
            .map_err(|e| Error::config("network.plan_file", e.to_string()))?;

        let fault = match &self.fault {
            Some(f) => {
                if topology.bus_index(f.bus).is_none() {
                    return Err(Error::config("fault.bus", format!("bus {} is not in the network", f.bus)));
                }
                if topology.substation().map(|b| b.id) == Some(f.bus) {
                    return Err(Error::config("fault.bus", "fault at the substation is not a lateral"));
                }
                Some(f.to_scenario()?)
            }
            None => None,
        };

        let t = &self.timeline;
        if !(t.snapshot_period_s > 0.0) {
            return Err(Error::config("timeline.snapshot_period_s", "must be positive"));
        }
        if !(t.window_s >= t.snapshot_period_s) {
            return Err(Error::config("timeline.window_s", "must cover at least one snapshot"));
        }
        if !(t.noise_fraction >= 0.0) {
            return Err(Error::config("timeline.noise_fraction", "must be non-negative"));
        }
        let noise = if t.noise_fraction == 0.0 {
            NoiseModel::None
        } else {
            NoiseModel::ReadingFraction(t.noise_fraction)
        };
        let timeline = TimelineConfig {
            snapshot_period_s: t.snapshot_period_s,
            window_s: t.window_s,
            base_seed: t.base_seed,
            noise,
        };

        let d = &self.detection;
        let pipeline = PipelineConfig {
            p: d.p,
            beta: d.beta,
            dof: d.dof,
            step1_fraction: d.step1_fraction,
            precision,
            ..PipelineConfig::default()
        };
        pipeline
            .validate()
            .map_err(|e| Error::config("detection", e.to_string()))?;
        if self.monte_carlo.runs < 1 {
            return Err(Error::config("monte_carlo.runs", "must be at least 1"));
        }
        if !(self.synthetic.target_grl >= 0.0) {
            return Err(Error::config("synthetic.target_grl", "must be non-negative"));
        }
        Ok(ResolvedScenario {
            name: self.name.clone(),
            topology,
            plan,
            fault,
            timeline,
            pipeline,
            synthetic: self.synthetic,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }
}

pub fn builtin_network(name: &str) -> Result<NetworkTopology> {
    match name {
        "baran-wu-33" => Ok(builtin_baran_wu_33()),
        _ => Err(Error::UnknownBuiltin {
            name: name.into(),
            available: BUILTIN_NETWORKS.join(", "),
        }),
    }
}

/// Shoulder resistances giving an upstream RMS displacement just under
/// 6 A at each fault location.
pub fn builtin_scenario(name: &str) -> Result<ScenarioConfig> {
    let fault = match name {
        "bus20-A" => Some(FaultConfig::lateral(20, Phase::A, 820.0)),
        "bus10-B" => Some(FaultConfig::lateral(10, Phase::B, 750.0)),
        "bus28-C" => Some(FaultConfig {
            intermittency: Some(IntermittencyConfig {
                t_on_s: 0.7,
                t_off_s: 0.8,
            }),
            ..FaultConfig::lateral(28, Phase::C, 600.0)
        }),
        "no-fault" => None,
        _ => {
            return Err(Error::UnknownBuiltin {
                name: name.into(),
                available: BUILTIN_SCENARIOS.join(", "),
            })
        }
    };
    Ok(ScenarioConfig::new(name, fault))
}

pub fn list_builtins() -> Vec<String> {
    BUILTIN_NETWORKS
        .iter()
        .map(|n| format!("network  {n}"))
        .chain(BUILTIN_SCENARIOS.iter().map(|s| format!("scenario {s}")))
        .collect()
}

/// Bus, branch and measurement plan summary of a network.
pub fn describe(topology: &NetworkTopology) -> Result<String> {
    topology.validate_full()?;
    let base = topology.per_unit_base();
    let closed = topology.closed_branches().count();
    let tree = topology.tree()?;
    let leaves: Vec<String> = (0..topology.buses.len())
        .filter(|&i| tree.is_leaf(i))
        .map(|i| topology.buses[i].id.to_string())
        .collect();
    let (p, q) = topology.buses.iter().fold((0.0, 0.0), |(p, q), b| {
        (
            p + b.load_per_phase.iter().map(|l| l.p_kw).sum::<f64>(),
            q + b.load_per_phase.iter().map(|l| l.q_kvar).sum::<f64>(),
        )
    });
    let mut out = format!(
        "network {}\n{} buses, {} branches ({} closed)\nbase {} kV, {} MVA\nsubstation bus {}\nleaf buses {}\ntotal load {:.1} kW, {:.1} kvar\n",
        topology.name,
        topology.buses.len(),
        topology.branches.len(),
        closed,
        base.kv_ll,
        base.mva_3ph,
        topology.substation().map_or("-".into(), |b| b.id.to_string()),
        leaves.join(" "),
        p,
        q,
    );
    let plan = default_measurement_plan(topology).unwrap_or_else(|_| full_measurement_plan(topology, &MeterPrecision::default()));
    for phase in Phase::ALL {
        out.push_str(&format!(
            "phase {phase}: {} measurements, {} states, GRL {:.2}\n",
            plan.per_phase_count(phase),
            topology.state_count(),
            plan.grl(phase, topology)
        ));
    }
    Ok(out)
}

/// Upstream current figures of the faulted phase (amperes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSummary {
    pub bus: BusId,
    pub phase: Phase,
    pub upstream_bus: BusId,
    pub pre_fault_a: f64,
    pub shoulder_a: f64,
    /// `shoulder - pre-fault`.
    pub displacement_a: f64,
    pub shoulder_hif_a: f64,
    /// Upstream current at the first in-window detection on the faulted
    /// phase.
    pub at_detection_a: Option<f64>,
    /// Fault current at that snapshot.
    pub hif_at_detection_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub index: usize,
    pub time_s: f64,
    pub stage: FaultStage,
    pub j: Vec<f64>,
    pub threshold: Vec<f64>,
    pub detected: Vec<bool>,
    pub verdict: Verdict,
    /// Highest-ranked step-2 entry of the dominant phase.
    pub top: Option<String>,
}

impl SnapshotSummary {
    pub fn j(&self, phase: Phase) -> f64 {
        self.j[phase.index()]
    }

    pub fn detected(&self, phase: Phase) -> bool {
        self.detected[phase.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub fault: Option<(BusId, Phase)>,
    pub snapshots: Vec<SnapshotSummary>,
    /// First detection inside the fault window.
    pub first_detection_s: Option<f64>,
    pub first_detection_phases: Vec<Phase>,
    /// Detections outside the fault window (all of them without a fault).
    pub detections_outside_window: usize,
    /// Snapshot with the largest step-1 objective among detections.
    pub decision_snapshot: Option<usize>,
    pub final_classification: Verdict,
    pub top_entry: Option<String>,
    pub displacement: Option<DisplacementSummary>,
}

impl RunSummary {
    /// Whether the top entry is the real injection at the fault bus on
    /// the faulted phase.
    pub fn top_is_fault_injection(&self) -> bool {
        match (self.fault, &self.top_entry) {
            (Some((bus, phase)), Some(top)) => *top == format!("P:{bus}:{phase}"),
            _ => false,
        }
    }

    pub fn names_fault_bus(&self) -> bool {
        match (self.fault, &self.final_classification) {
            (
                Some((bus, phase)),
                Verdict::ParameterError {
                    suspected_bus,
                    phase: p,
                    ..
                },
            ) => *suspected_bus == bus && *p == phase,
            _ => false,
        }
    }

    pub fn series(&self, phase: Phase) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.j(phase)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub index: usize,
    pub time_s: f64,
    pub stage: FaultStage,
    pub in_window: bool,
    pub hif_current_a: f64,
    /// Current on the branch feeding the fault bus, faulted phase.
    pub upstream_current_a: Option<f64>,
    /// Plan including this snapshot's synthetic measurements, when any.
    pub plan: Option<MeasurementPlan>,
    pub measurements: MeasurementSet,
    pub outcome: PipelineOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub summary: RunSummary,
    pub plan: MeasurementPlan,
    pub records: Vec<SnapshotRecord>,
}

impl ScenarioRun {
    pub fn plan_for<'a>(&'a self, record: &'a SnapshotRecord) -> &'a MeasurementPlan {
        record.plan.as_ref().unwrap_or(&self.plan)
    }
}

/// Runs the scenario with its configured seed.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun> {
    let resolved = config.resolve()?;
    run_resolved(&resolved, resolved.timeline.base_seed)
}

/// Runs an already resolved scenario with a given base seed.
pub fn run_resolved(sc: &ResolvedScenario, seed: u64) -> Result<ScenarioRun> {
    let timeline = TimelineConfig {
        base_seed: seed,
        ..sc.timeline
    };
    let snapshots = run_timeline(&sc.topology, &sc.plan, sc.fault.as_ref(), &timeline)?;
    let upstream = match &sc.fault {
        Some(f) => Some(upstream_branch(&sc.topology, f.bus)?.0),
        None => None,
    };

    let mut records: Vec<SnapshotRecord> = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let wrap = |e: Error| Error::Snapshot {
            index: snap.index,
            source: Box::new(e),
        };
        let prev = records.last();
        let (plan, measurements) = with_synthetic(sc, prev, &snap.measurements).map_err(wrap)?;
        let warm: Option<Vec<Option<PhaseState>>> = prev.map(|r| r.outcome.step1.states());
        let outcome = two_step_pipeline(
            &sc.topology,
            plan.as_ref().unwrap_or(&sc.plan),
            &measurements,
            &sc.pipeline,
            warm.as_deref(),
        )
        .map_err(wrap)?;
        let (hif_current_a, upstream_current_a) = match (&sc.fault, upstream) {
            (Some(f), Some(up)) => (
                snap.solution.hif_current_amps(f.phase),
                snap.solution.branch_current_amps(&sc.topology, f.phase, up, f.bus),
            ),
            _ => (0.0, None),
        };
        records.push(SnapshotRecord {
            index: snap.index,
            time_s: snap.time_s,
            stage: fault_stage(sc.fault.as_ref(), snap.time_s),
            in_window: sc.fault.as_ref().is_some_and(|f| f.is_active(snap.time_s)),
            hif_current_a,
            upstream_current_a,
            plan,
            measurements,
            outcome,
        });
    }
    let summary = summarize(sc, seed, &records)?;
    Ok(ScenarioRun {
        summary,
        plan: sc.plan.clone(),
        records,
    })
}

/// Synthetic measurements for this snapshot from the previous estimate.
fn with_synthetic(
    sc: &ResolvedScenario,
    prev: Option<&SnapshotRecord>,
    set: &MeasurementSet,
) -> Result<(Option<MeasurementPlan>, MeasurementSet)> {
    if !sc.synthetic.enabled {
        return Ok((None, set.clone()));
    }
    let Some(prev) = prev else {
        return Ok((None, set.clone()));
    };
    let prev_plan = prev.plan.as_ref().unwrap_or(&sc.plan);
    let mut plan = sc.plan.clone();
    let mut values = set.clone();
    let mut added = false;
    for pe in &prev.outcome.step1.phases {
        let quota = synthetic_quota(&sc.plan, pe.phase, &sc.topology, sc.synthetic.target_grl);
        let has_critical = pe.critical.iter().any(|&c| c);
        if quota == 0 && !has_critical {
            continue;
        }
        let gains = pe.gain_factors(&sc.topology, prev_plan)?;
        let specs: Vec<_> = pe.plan_indices.iter().map(|&i| prev_plan.specs[i]).collect();
        let vi = vi_scores(&gains.k, &specs, &sc.topology);
        let sm = generate_synthetic(
            Some(pe),
            &sc.topology,
            prev_plan,
            &vi,
            quota,
            &sc.pipeline.precision,
            Some(prev.time_s),
        )?;
        if !sm.is_empty() {
            (plan, values) = sm.augment(&plan, &values);
            added = true;
        }
    }
    Ok((added.then_some(plan), values))
}

fn summarize(sc: &ResolvedScenario, seed: u64, records: &[SnapshotRecord]) -> Result<RunSummary> {
    let snapshots: Vec<SnapshotSummary> = records
        .iter()
        .map(|r| {
            let rep = &r.outcome.report;
            let mut j = vec![f64::NAN; 3];
            let mut threshold = vec![f64::NAN; 3];
            let mut detected = vec![false; 3];
            for t in &rep.tests {
                j[t.phase.index()] = t.j;
                threshold[t.phase.index()] = t.threshold;
                detected[t.phase.index()] = t.detected;
            }
            let verdict = rep.verdict();
            let top = dominant_top(rep);
            SnapshotSummary {
                index: r.index,
                time_s: r.time_s,
                stage: r.stage,
                j,
                threshold,
                detected,
                verdict,
                top,
            }
        })
        .collect();

    let first = records
        .iter()
        .zip(&snapshots)
        .find(|(r, s)| r.in_window && s.detected.iter().any(|&d| d));
    let first_detection_s = first.map(|(r, _)| r.time_s);
    let first_detection_phases = first
        .map(|(_, s)| Phase::ALL.into_iter().filter(|&p| s.detected(p)).collect())
        .unwrap_or_default();
    let detections_outside_window = records
        .iter()
        .zip(&snapshots)
        .filter(|(r, s)| !r.in_window && s.detected.iter().any(|&d| d))
        .count();

    let decision = snapshots
        .iter()
        .filter_map(|s| {
            let best = Phase::ALL
                .into_iter()
                .filter(|&p| s.detected(p))
                .map(|p| s.j(p))
                .fold(f64::NEG_INFINITY, f64::max);
            (best > f64::NEG_INFINITY).then_some((s.index, best))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let (final_classification, top_entry) = match decision {
        Some(i) => (snapshots[i].verdict.clone(), snapshots[i].top.clone()),
        None => (Verdict::NoError, None),
    };

    let displacement = match &sc.fault {
        Some(f) => Some(displacement_summary(sc, f, records, &snapshots)?),
        None => None,
    };

    Ok(RunSummary {
        name: sc.name.clone(),
        seed,
        fault: sc.fault.as_ref().map(|f| (f.bus, f.phase)),
        snapshots,
        first_detection_s,
        first_detection_phases,
        detections_outside_window,
        decision_snapshot: decision,
        final_classification,
        top_entry,
        displacement,
    })
}

fn dominant_top(rep: &crate::analytics::DetectionReport) -> Option<String> {
    rep.findings
        .iter()
        .max_by(|a, b| {
            let ja = rep.test(a.phase).map_or(0.0, |t| t.j);
            let jb = rep.test(b.phase).map_or(0.0, |t| t.j);
            ja.total_cmp(&jb)
        })
        .and_then(|f| f.ranking.first())
        .map(|e| e.label.clone())
}

fn displacement_summary(
    sc: &ResolvedScenario,
    fault: &HifScenario,
    records: &[SnapshotRecord],
    snapshots: &[SnapshotSummary],
) -> Result<DisplacementSummary> {
    let (upstream_bus, _) = upstream_branch(&sc.topology, fault.bus)?;
    // steady currents from noise-free solutions
    let pre = crate::powerflow::solve_power_flow(&sc.topology, None)?;
    let t_sh = fault.t_start_s + fault.rf.buildup_duration_s;
    let shoulder_time = (0..)
        .map(|k| t_sh + k as f64 * 1e-3)
        .take_while(|&t| fault.is_active(t))
        .find(|&t| fault_stage(Some(fault), t) == FaultStage::Shoulder)
        .unwrap_or(t_sh);
    let post = crate::powerflow::solve_power_flow(&sc.topology, Some((fault, shoulder_time)))?;
    let amps = |s: &crate::powerflow::PhasorSolution| {
        s.branch_current_amps(&sc.topology, fault.phase, upstream_bus, fault.bus)
            .unwrap_or(0.0)
    };
    let pre_a = amps(&pre);
    let shoulder_a = amps(&post);
    let det = records
        .iter()
        .zip(snapshots)
        .find(|(r, s)| r.in_window && s.detected(fault.phase));
    Ok(DisplacementSummary {
        bus: fault.bus,
        phase: fault.phase,
        upstream_bus,
        pre_fault_a: pre_a,
        shoulder_a,
        displacement_a: shoulder_a - pre_a,
        shoulder_hif_a: post.hif_current_amps(fault.phase),
        at_detection_a: det.and_then(|(r, _)| r.upstream_current_a),
        hif_at_detection_a: det.map(|(r, _)| r.hif_current_a),
    })
}

/// Per-run seed: a splitmix64 step from the base seed.
pub fn derive_seed(base: u64, run: usize) -> u64 {
    let mut z = base.wrapping_add((run as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub name: String,
    pub runs_requested: usize,
    pub runs: Vec<RunSummary>,
    pub failed: Vec<FailedRun>,
    /// Per phase: fraction of snapshot tests in the evaluation window
    /// (the fault window, or the whole timeline without a fault) that
    /// detect.
    pub detection_rate: Vec<f64>,
    /// Runs where the faulted phase is detected in the fault window.
    pub fault_detected_rate: Option<f64>,
    /// Runs whose top CME^N entry is the real injection at the fault bus.
    pub top_hit_rate: Option<f64>,
    /// Runs classified as parameter error at the true bus.
    pub parameter_hit_rate: Option<f64>,
    /// Runs ending in a parameter-error or multi-candidate verdict that
    /// does not name the true bus (any such verdict without a fault).
    pub false_verdict_rate: f64,
}

/// Repeats the scenario with derived seeds. Failed runs are reported, not
/// fatal.
pub fn run_monte_carlo(config: &ScenarioConfig) -> Result<MonteCarloSummary> {
    let runs = config.monte_carlo.runs;
    if runs < 2 {
        return Err(Error::config("monte_carlo.runs", format!("needs at least 2 runs, got {runs}")));
    }
    let sc = config.resolve()?;
    let base = sc.timeline.base_seed;
    let job = || -> Vec<(usize, u64, Result<RunSummary>)> {
        (0..runs)
            .into_par_iter()
            .map(|r| {
                let seed = derive_seed(base, r);
                (r, seed, run_resolved(&sc, seed).map(|run| run.summary))
            })
            .collect()
    };
    let results = if config.monte_carlo.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.monte_carlo.workers)
            .build()
            .map_err(|e| Error::config("monte_carlo.workers", e.to_string()))?
            .install(job)
    } else {
        job()
    };

    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (run, seed, res) in results {
        match res {
            Ok(s) => ok.push(s),
            Err(e) => failed.push(FailedRun {
                run,
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(aggregate(&sc, runs, ok, failed))
}

fn aggregate(sc: &ResolvedScenario, requested: usize, runs: Vec<RunSummary>, failed: Vec<FailedRun>) -> MonteCarloSummary {
    let n = runs.len().max(1) as f64;
    let in_window = |s: &SnapshotSummary| match &sc.fault {
        Some(f) => f.is_active(s.time_s),
        None => true,
    };
    let detection_rate = Phase::ALL
        .iter()
        .map(|&p| {
            let (hits, total) = runs
                .iter()
                .flat_map(|r| r.snapshots.iter().filter(|s| in_window(s)))
                .fold((0usize, 0usize), |(h, t), s| (h + s.detected(p) as usize, t + 1));
            hits as f64 / total.max(1) as f64
        })
        .collect();
    let rate = |f: &dyn Fn(&RunSummary) -> bool| runs.iter().filter(|r| f(r)).count() as f64 / n;
    let fault = sc.fault.as_ref().map(|f| (f.bus, f.phase));
    let false_verdict_rate = rate(&|r| match &r.final_classification {
        Verdict::ParameterError { .. } => !r.names_fault_bus(),
        Verdict::MultiCandidate { .. } => true,
        _ => false,
    });
    MonteCarloSummary {
        name: sc.name.clone(),
        runs_requested: requested,
        fault_detected_rate: fault.map(|(_, ph)| {
            rate(&|r| r.snapshots.iter().any(|s| in_window(s) && s.detected(ph)))
        }),
        top_hit_rate: fault.map(|_| rate(&|r| r.top_is_fault_injection())),
        parameter_hit_rate: fault.map(|_| rate(&|r| r.names_fault_bus())),
        false_verdict_rate,
        detection_rate,
        runs,
        failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_listed_and_valid() {
        let l = list_builtins();
        assert!(l.iter().any(|s| s.contains("baran-wu-33")));
        for name in BUILTIN_SCENARIOS {
            builtin_scenario(name).unwrap().validate().unwrap();
        }
        let err = builtin_scenario("bus99").unwrap_err();
        assert!(err.to_string().contains("bus20-A"));
    }

    #[test]
    fn describe_counts() {
        let d = describe(&builtin_baran_wu_33()).unwrap();
        assert!(d.contains("33 buses, 32 branches"), "{d}");
        assert!(matches!(builtin_network("ieee-999"), Err(Error::UnknownBuiltin { .. })));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = builtin_scenario("bus28-C").unwrap();
        let text = cfg.to_toml_string();
        assert!(text.contains("r_shoulder_ohm"));
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = builtin_scenario("bus20-A").unwrap();
        cfg.fault.as_mut().unwrap().bus = 77;
        let err = cfg.validate().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("fault.bus"), "{err}");

        let mut cfg = builtin_scenario("no-fault").unwrap();
        cfg.timeline.snapshot_period_s = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("timeline.snapshot_period_s"));

        let err = ScenarioConfig::from_toml_str("name = \"x\"\n[timeline]\nperiod = 3\n").unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn single_run_monte_carlo_is_rejected() {
        let mut cfg = builtin_scenario("no-fault").unwrap();
        cfg.monte_carlo.runs = 1;
        assert!(run_monte_carlo(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|r| derive_seed(7, r)).collect();
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn zero_noise_no_fault_never_detects() {
        let mut cfg = builtin_scenario("no-fault").unwrap();
        cfg.timeline.noise_fraction = 0.0;
        cfg.timeline.window_s = 0.5;
        let run = run_scenario(&cfg).unwrap();
        assert_eq!(run.records.len(), 5);
        for s in &run.summary.snapshots {
            assert!(s.detected.iter().all(|d| !d));
            assert!(s.j.iter().all(|&j| j < 1e-10), "{:?}", s.j);
        }
        assert_eq!(run.summary.final_classification, Verdict::NoError);
    }
}
