//! Measurement snapshots from power-flow solutions.
//!
//! Injection meters sit at the load end of each lateral, so a fault on the
//! lateral is upstream of the meter: the metered injection is the load
//! alone, while branch flows and voltages see the fault draw. That mismatch
//! is what the estimator perceives as a parameter error.

use crate::error::{Error, Result};
use crate::hif::HifScenario;
use crate::model::{PhaseModel, PhaseState, Resolved};
use crate::network::{MeasurementPlan, NetworkTopology, Phase};
use crate::powerflow::{solve_power_flow_with, PhasorSolution, SolverOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Truth magnitudes below this get [`SIGMA_FLOOR`].
pub const SMALL_TRUTH: f64 = 1e-6;
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// `sigma_i = fraction * |truth_i|`, floored for near-zero truths.
    ReadingFraction(f64),
    None,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::ReadingFraction(0.01)
    }
}

impl NoiseModel {
    pub fn sigma(&self, truth: f64) -> f64 {
        match *self {
            NoiseModel::ReadingFraction(f) => relative_sigma(truth, f),
            NoiseModel::None => 0.0,
        }
    }
}

/// `fraction * |z|`, or the floor when `|z|` is essentially zero.
pub fn relative_sigma(z: f64, fraction: f64) -> f64 {
    if z.abs() < SMALL_TRUTH {
        SIGMA_FLOOR
    } else {
        fraction * z.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub timestamp_s: f64,
    /// Aligned with the plan specs.
    pub values: Vec<f64>,
    pub truth: Vec<f64>,
    /// Standard deviation of the noise actually applied.
    pub noise_sigma: Vec<f64>,
    /// For synthetic entries, the timestamp of the estimate they came from.
    pub sm_timestamp_s: Vec<Option<f64>>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_aligned(&self, plan: &MeasurementPlan) -> Result<()> {
        if self.values.len() != plan.len() {
            return Err(Error::Misaligned {
                expected: plan.len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Noise-free value of every plan measurement under a solution.
pub fn measurement_truth(solution: &PhasorSolution, topology: &NetworkTopology, plan: &MeasurementPlan) -> Result<Vec<f64>> {
    let model = PhaseModel::new(topology)?;
    let states: Vec<PhaseState> = solution
        .phases
        .iter()
        .map(|ph| PhaseState::from_phasors(&ph.v))
        .collect();
    plan.specs
        .iter()
        .map(|spec| {
            let ph = solution.phase(spec.phase);
            let m = model.resolve(spec)?;
            let mut value = model.value(&m, &states[spec.phase.index()]);
            if let Resolved::Injection { bus, reactive } = m {
                if ph.hif_bus == Some(bus) {
                    // the fault draw is not metered
                    value += if reactive { ph.hif_draw.im } else { ph.hif_draw.re };
                }
            }
            Ok(value)
        })
        .collect()
}

/// Noisy measurements for every plan spec: `truth + sigma * xi` with
/// `xi ~ N(0, 1)` drawn from a generator seeded with `noise_seed`.
pub fn generate_measurements(
    solution: &PhasorSolution,
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    noise: NoiseModel,
    noise_seed: u64,
    timestamp_s: f64,
) -> Result<MeasurementSet> {
    if !solution.converged {
        return Err(Error::InvalidScenario("measurements need a converged power flow".into()));
    }
    let truth = measurement_truth(solution, topology, plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise_sigma: Vec<f64> = truth.iter().map(|&z| noise.sigma(z)).collect();
    let values = truth
        .iter()
        .zip(&noise_sigma)
        .map(|(&z, &s)| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            z + s * xi
        })
        .collect();
    Ok(MeasurementSet {
        timestamp_s,
        values,
        truth,
        noise_sigma,
        sm_timestamp_s: vec![None; plan.len()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineConfig {
    pub snapshot_period_s: f64,
    pub window_s: f64,
    pub base_seed: u64,
    pub noise: NoiseModel,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        Self {
            snapshot_period_s: 0.1,
            window_s: 2.0,
            base_seed: 0x5eed,
            noise: NoiseModel::default(),
        }
    }
}

impl TimelineConfig {
    pub fn snapshot_count(&self) -> usize {
        (self.window_s / self.snapshot_period_s - 1e-9).ceil().max(0.0) as usize
    }

    pub fn snapshot_time(&self, index: usize) -> f64 {
        index as f64 * self.snapshot_period_s
    }

    pub fn snapshot_seed(&self, index: usize) -> u64 {
        self.base_seed ^ index as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub index: usize,
    pub time_s: f64,
    pub solution: PhasorSolution,
    pub measurements: MeasurementSet,
}

/// Where a snapshot sits relative to the fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultStage {
    PreFault,
    BuildUp,
    Shoulder,
    Intermittent,
    PostFault,
}

pub fn fault_stage(scenario: Option<&HifScenario>, t: f64) -> FaultStage {
    let Some(sc) = scenario else {
        return FaultStage::PreFault;
    };
    if t < sc.t_start_s {
        return FaultStage::PreFault;
    }
    if !sc.is_active(t) {
        return FaultStage::PostFault;
    }
    let rel = t - sc.t_start_s;
    if sc.rf.intermittency.is_some_and(|w| w.contains(rel)) {
        FaultStage::Intermittent
    } else if rel < sc.rf.buildup_duration_s {
        FaultStage::BuildUp
    } else {
        FaultStage::Shoulder
    }
}

/// Solves and measures every snapshot of the window. Snapshots are
/// independent and evaluated in parallel; output is in time order.
pub fn run_timeline(
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    scenario: Option<&HifScenario>,
    config: &TimelineConfig,
) -> Result<Vec<Snapshot>> {
    if !(config.snapshot_period_s > 0.0) {
        return Err(Error::config("snapshot_period_s", "must be positive"));
    }
    if let Some(sc) = scenario {
        sc.validate()?;
        if topology.bus_index(sc.bus).is_none() {
            return Err(Error::InvalidScenario(format!("fault bus {} not in network", sc.bus)));
        }
    }
    plan.validate(topology)?;
    let opts = SolverOptions::default();
    (0..config.snapshot_count())
        .into_par_iter()
        .map(|index| {
            let t = config.snapshot_time(index);
            let wrap = |e: Error| Error::Snapshot { index, source: Box::new(e) };
            let solution = solve_power_flow_with(topology, scenario.map(|s| (s, t)), &opts).map_err(wrap)?;
            let measurements =
                generate_measurements(&solution, topology, plan, config.noise, config.snapshot_seed(index), t)
                    .map_err(wrap)?;
            Ok(Snapshot {
                index,
                time_s: t,
                solution,
                measurements,
            })
        })
        .collect()
}

/// Change in RMS current (A) on the branch feeding the fault bus between
/// two solutions, `|I_post| - |I_pre|`.
pub fn rms_displacement(
    topology: &NetworkTopology,
    pre: &PhasorSolution,
    post: &PhasorSolution,
    bus: u32,
    phase: Phase,
) -> Result<f64> {
    let (upstream, _) = upstream_branch(topology, bus)?;
    let a = pre.branch_current_amps(topology, phase, upstream, bus).unwrap_or(0.0);
    let b = post.branch_current_amps(topology, phase, upstream, bus).unwrap_or(0.0);
    Ok(b - a)
}

/// Parent bus and branch index of the branch feeding `bus`.
pub fn upstream_branch(topology: &NetworkTopology, bus: u32) -> Result<(u32, usize)> {
    let tree = topology.tree()?;
    let idx = topology
        .bus_index(bus)
        .ok_or_else(|| Error::InvalidScenario(format!("unknown bus {bus}")))?;
    let (parent, k) = tree.parent[idx]
        .ok_or_else(|| Error::InvalidScenario(format!("bus {bus} is the substation")))?;
    Ok((topology.buses[parent].id, k))
}
