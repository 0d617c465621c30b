//! Gross-error analytics: chi-square detection, the two-step pipeline,
//! CME^N ranking, and the measurement-error versus parameter-error
//! classification that locates a lateral fault.

use crate::chi2::chi2_threshold;
use crate::error::{Error, Result};
use crate::estimator::{
    wls_estimate_with, EstimationResult, EstimatorOptions, PhaseEstimate, PhaseState, WeightingStep, CRITICAL_TOL,
};
use crate::model::PhaseModel;
use crate::network::{
    BusId, Location, MeasurementKind, MeasurementPlan, MeasurementSpec, MeterPrecision, NetworkTopology, Phase,
};
use crate::sim::MeasurementSet;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

/// How the chi-square test counts degrees of freedom and which objective
/// it compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DofConvention {
    /// `J_CME` against `chi2(m_i)`.
    #[default]
    MeasurementCount,
    /// Classical residual objective against `chi2(m_i - N)`.
    Redundancy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Test {
    pub phase: Phase,
    pub p: f64,
    pub dof: usize,
    pub threshold: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub detected: bool,
}

/// Per-phase chi-square test of an estimate.
pub fn detect(result: &EstimationResult, p: f64, convention: DofConvention) -> Result<Vec<Chi2Test>> {
    result
        .phases
        .iter()
        .map(|pe| {
            let m = pe.measurement_count();
            let (dof, j) = match convention {
                DofConvention::MeasurementCount => (m, pe.objective),
                DofConvention::Redundancy => (m.saturating_sub(pe.state.len() * 2 - 1), pe.residual_objective),
            };
            let threshold = chi2_threshold(dof, p)?;
            Ok(Chi2Test {
                phase: pe.phase,
                p,
                dof,
                threshold,
                j,
                detected: j > threshold,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmeRankEntry {
    /// `kind:location:phase`.
    pub label: String,
    pub spec: MeasurementSpec,
    pub plan_index: usize,
    pub innovation_index: f64,
    pub cme_n: f64,
}

/// Measurements with `|CME^N| > beta`, largest first; ties broken by label.
pub fn rank_cme(estimate: &PhaseEstimate, plan: &MeasurementPlan, beta: f64) -> Vec<CmeRankEntry> {
    let mut out: Vec<CmeRankEntry> = estimate
        .plan_indices
        .iter()
        .enumerate()
        .filter(|(k, _)| estimate.cme_n[*k].abs() > beta)
        .map(|(k, &i)| CmeRankEntry {
            label: plan.specs[i].full_label(),
            spec: plan.specs[i],
            plan_index: i,
            innovation_index: estimate.innovation_index[k],
            cme_n: estimate.cme_n[k],
        })
        .collect();
    out.sort_by(|a, b| {
        b.cme_n
            .abs()
            .partial_cmp(&a.cme_n.abs())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCandidate {
    /// Endpoints in ascending id order.
    pub branch: (BusId, BusId),
    pub suspected_bus: BusId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    NoError,
    MeasurementError {
        labels: Vec<String>,
    },
    ParameterError {
        phase: Phase,
        branches: Vec<(BusId, BusId)>,
        suspected_bus: BusId,
    },
    /// Qualifying branches point at different buses; needs operator review.
    MultiCandidate {
        phase: Phase,
        candidates: Vec<BranchCandidate>,
    },
}

impl Verdict {
    pub fn suspected_bus(&self) -> Option<BusId> {
        match self {
            Verdict::ParameterError { suspected_bus, .. } => Some(*suspected_bus),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Verdict::NoError => "no-error",
            Verdict::MeasurementError { .. } => "measurement-error",
            Verdict::ParameterError { .. } => "parameter-error",
            Verdict::MultiCandidate { .. } => "multi-candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: Verdict,
    pub beta: f64,
}

/// Separates isolated measurement errors from the spread a parameter error
/// leaves on the measurement functions of one branch.
///
/// A branch `i-j` is suspicious when both directed flows of one kind and
/// at least one endpoint injection exceed `beta` on the same phase. The
/// suspected lateral bus is the endpoint whose injection has the largest
/// `|CME^N|`. Only entries above `beta` are considered, so a plain ranking
/// can be passed straight in.
pub fn classify(ranked: &[CmeRankEntry], beta: f64) -> Classification {
    let above: Vec<&CmeRankEntry> = ranked.iter().filter(|e| e.cme_n.abs() > beta).collect();
    if above.is_empty() {
        return Classification {
            verdict: Verdict::NoError,
            beta,
        };
    }

    let mut by_phase: BTreeMap<Phase, Vec<&CmeRankEntry>> = BTreeMap::new();
    for e in &above {
        by_phase.entry(e.spec.phase).or_default().push(e);
    }

    let mut found: Vec<(Phase, BranchCandidate)> = Vec::new();
    for (&phase, entries) in &by_phase {
        // largest |CME^N| of any injection at each bus
        let mut injection: BTreeMap<BusId, f64> = BTreeMap::new();
        let mut flows: BTreeSet<(MeasurementKind, BusId, BusId)> = BTreeSet::new();
        for e in entries {
            match e.spec.location {
                Location::Bus(b) if e.spec.kind.is_injection() => {
                    let v = injection.entry(b).or_insert(0.0);
                    *v = v.max(e.cme_n.abs());
                }
                Location::Branch { from, to } if e.spec.kind.is_flow() => {
                    flows.insert((e.spec.kind, from, to));
                }
                _ => {}
            }
        }
        let mut branches: BTreeSet<(BusId, BusId)> = BTreeSet::new();
        for &(kind, from, to) in &flows {
            if flows.contains(&(kind, to, from)) {
                branches.insert((from.min(to), from.max(to)));
            }
        }
        for (a, b) in branches {
            let suspected = match (injection.get(&a), injection.get(&b)) {
                (Some(x), Some(y)) => Some(if y > x { b } else { a }),
                (Some(_), None) => Some(a),
                (None, Some(_)) => Some(b),
                (None, None) => None,
            };
            if let Some(bus) = suspected {
                found.push((
                    phase,
                    BranchCandidate {
                        branch: (a, b),
                        suspected_bus: bus,
                    },
                ));
            }
        }
    }

    let verdict = if found.is_empty() {
        Verdict::MeasurementError {
            labels: above.iter().map(|e| e.label.clone()).collect(),
        }
    } else {
        let first = &found[0];
        let same = found
            .iter()
            .all(|(ph, c)| *ph == first.0 && c.suspected_bus == first.1.suspected_bus);
        if same {
            Verdict::ParameterError {
                phase: first.0,
                branches: found.iter().map(|(_, c)| c.branch).collect(),
                suspected_bus: first.1.suspected_bus,
            }
        } else {
            Verdict::MultiCandidate {
                phase: first.0,
                candidates: found.into_iter().map(|(_, c)| c).collect(),
            }
        }
    };
    Classification { verdict, beta }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViScore {
    pub bus: BusId,
    pub vi: f64,
}

/// VI from explicit residual and CME sensitivity matrices.
///
/// `VI_i = sqrt(1/L sum_{l in L_i} sum_j (S_cme(l,j) - S_r(l,j))^2)` where
/// `L_i` are the measurements incident to bus `i`.
pub fn vi_from_sensitivities(
    s_r: &DMatrix<f64>,
    s_cme: &DMatrix<f64>,
    specs: &[MeasurementSpec],
    topology: &NetworkTopology,
) -> Vec<ViScore> {
    topology
        .buses
        .iter()
        .map(|bus| {
            let rows: Vec<usize> = specs
                .iter()
                .enumerate()
                .filter(|(_, s)| s.buses().contains(&bus.id))
                .map(|(l, _)| l)
                .collect();
            let vi = if rows.is_empty() {
                0.0
            } else {
                let total: f64 = rows
                    .iter()
                    .map(|&l| (0..s_r.ncols()).map(|j| (s_cme[(l, j)] - s_r[(l, j)]).powi(2)).sum::<f64>())
                    .sum();
                (total / rows.len() as f64).sqrt()
            };
            ViScore { bus: bus.id, vi }
        })
        .collect()
}

/// Residual sensitivity `S_r = I - K` and its CME counterpart, rows scaled
/// by `1 / sqrt(1 - K_ll)`.
pub fn sensitivities(k: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = k.nrows();
    let s_r = DMatrix::identity(n, n) - k;
    let mut s_cme = s_r.clone();
    for l in 0..n {
        let scale = 1.0 / (1.0 - k[(l, l)]).max(crate::estimator::K_EPS).sqrt();
        s_cme.row_mut(l).scale_mut(scale);
    }
    (s_r, s_cme)
}

/// VI per bus from a projection matrix; `specs` are the rows of `k`.
pub fn vi_scores(k: &DMatrix<f64>, specs: &[MeasurementSpec], topology: &NetworkTopology) -> Vec<ViScore> {
    let (s_r, s_cme) = sensitivities(k);
    vi_from_sensitivities(&s_r, &s_cme, specs, topology)
}

/// Synthetic measurements with values, ready to append to a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSet {
    pub specs: Vec<MeasurementSpec>,
    pub values: Vec<f64>,
    /// Timestamp of the estimate the values were computed from.
    pub source_timestamp_s: Option<f64>,
    /// Set when no previous estimate was available.
    pub warning: Option<String>,
}

impl SyntheticSet {
    pub fn empty(warning: Option<String>) -> Self {
        Self {
            specs: Vec::new(),
            values: Vec::new(),
            source_timestamp_s: None,
            warning,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Appends the synthetic measurements to a plan and a measurement set.
    pub fn augment(&self, plan: &MeasurementPlan, set: &MeasurementSet) -> (MeasurementPlan, MeasurementSet) {
        let mut plan = plan.clone();
        let mut set = set.clone();
        plan.specs.extend_from_slice(&self.specs);
        set.values.extend_from_slice(&self.values);
        set.truth.extend(std::iter::repeat_n(f64::NAN, self.len()));
        set.noise_sigma.extend(std::iter::repeat_n(0.0, self.len()));
        set.sm_timestamp_s
            .extend(std::iter::repeat_n(self.source_timestamp_s, self.len()));
        (plan, set)
    }
}

/// Number of measurements needed on `phase` to reach `target_grl`.
pub fn synthetic_quota(plan: &MeasurementPlan, phase: Phase, topology: &NetworkTopology, target_grl: f64) -> usize {
    let need = (target_grl * topology.state_count() as f64).ceil() as usize;
    need.saturating_sub(plan.per_phase_count(phase))
}

/// Places synthetic injection measurements for one phase.
///
/// Injections go first to buses incident to critical measurements, then to
/// the highest-VI buses that have no injection meter of that kind, until
/// `quota` specs have been emitted (critical coverage is not limited by the
/// quota). Values are the injections at the previous estimate.
pub fn generate_synthetic(
    prev: Option<&PhaseEstimate>,
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    vi: &[ViScore],
    quota: usize,
    precision: &MeterPrecision,
    prev_timestamp_s: Option<f64>,
) -> Result<SyntheticSet> {
    let Some(prev) = prev else {
        return Ok(SyntheticSet::empty(Some("no previous estimate; synthetic measurements skipped".into())));
    };
    let phase = prev.phase;
    let model = PhaseModel::new(topology)?;
    let present: BTreeSet<(MeasurementKind, BusId)> = plan
        .specs
        .iter()
        .filter(|s| s.phase == phase && s.kind.is_injection())
        .filter_map(|s| s.at_bus().map(|b| (s.kind, b)))
        .collect();

    let mut wanted: Vec<(MeasurementKind, BusId)> = Vec::new();
    let push = |wanted: &mut Vec<_>, kind, bus| {
        if !present.contains(&(kind, bus)) && !wanted.contains(&(kind, bus)) {
            wanted.push((kind, bus));
        }
    };

    for (k, &i) in prev.plan_indices.iter().enumerate() {
        if prev.k_diag[k] > 1.0 - CRITICAL_TOL {
            for bus in plan.specs[i].buses() {
                push(&mut wanted, MeasurementKind::PInj, bus);
                push(&mut wanted, MeasurementKind::QInj, bus);
            }
        }
    }
    let critical_count = wanted.len();

    let mut ranked: Vec<&ViScore> = vi.iter().collect();
    ranked.sort_by(|a, b| b.vi.partial_cmp(&a.vi).unwrap_or(Ordering::Equal).then(a.bus.cmp(&b.bus)));
    'outer: for s in ranked {
        for kind in [MeasurementKind::PInj, MeasurementKind::QInj] {
            if wanted.len() >= critical_count + quota {
                break 'outer;
            }
            push(&mut wanted, kind, s.bus);
        }
    }

    let mut specs = Vec::with_capacity(wanted.len());
    let mut values = Vec::with_capacity(wanted.len());
    for (kind, bus) in wanted {
        let spec = MeasurementSpec::synthetic(kind, Location::Bus(bus), phase, precision.synthetic);
        let resolved = model.resolve(&spec)?;
        values.push(model.value(&resolved, &prev.state));
        specs.push(spec);
    }
    Ok(SyntheticSet {
        specs,
        values,
        source_timestamp_s: prev_timestamp_s,
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterErrorEstimate {
    pub label: String,
    pub delta_p: f64,
    pub h_p0: f64,
}

/// First-order parameter error `(z - h0) / H_p0`.
pub fn estimate_parameter_error(z: f64, h0: f64, h_p0: f64) -> Result<ParameterErrorEstimate> {
    if !(h_p0.abs() >= 1e-12) {
        return Err(Error::InsensitiveParameter(h_p0));
    }
    Ok(ParameterErrorEstimate {
        label: String::new(),
        delta_p: (z - h0) / h_p0,
        h_p0,
    })
}

/// Shunt conductance (pu) at `bus` that explains the real injection
/// mismatch there. The injection gains `g V^2` from a shunt `g`, so
/// `H_p0 = V^2`; a positive value is an added conductance.
pub fn lateral_conductance_error(estimate: &PhaseEstimate, plan: &MeasurementPlan, bus: BusId) -> Result<ParameterErrorEstimate> {
    let k = estimate
        .plan_indices
        .iter()
        .position(|&i| {
            let s = &plan.specs[i];
            s.kind == MeasurementKind::PInj && s.at_bus() == Some(bus)
        })
        .ok_or_else(|| Error::InvalidPlan(format!("no real injection measurement at bus {bus}")))?;
    let idx = estimate
        .bus_ids
        .iter()
        .position(|&b| b == bus)
        .ok_or_else(|| Error::InvalidPlan(format!("bus {bus} outside the estimated state")))?;
    let v = estimate.state.vm[idx];
    let mut out = estimate_parameter_error(estimate.measured[k], estimate.estimated[k], v * v)?;
    out.label = plan.specs[estimate.plan_indices[k]].full_label();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub p: f64,
    pub beta: f64,
    pub dof: DofConvention,
    pub step1_fraction: f64,
    pub precision: MeterPrecision,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let o = EstimatorOptions::default();
        Self {
            p: 0.95,
            beta: 3.0,
            dof: DofConvention::default(),
            step1_fraction: 0.01,
            precision: MeterPrecision::default(),
            tolerance: o.tolerance,
            max_iterations: o.max_iterations,
        }
    }
}

impl PipelineConfig {
    fn options(&self) -> EstimatorOptions {
        EstimatorOptions {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::config("p", "must be in (0, 1)"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(self.step1_fraction > 0.0) {
            return Err(Error::config("step1_fraction", "must be positive"));
        }
        self.precision.validate()
    }
}

/// Step-2 findings for one phase flagged in step 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseFinding {
    pub phase: Phase,
    pub step2_objective: f64,
    pub ranking: Vec<CmeRankEntry>,
    pub classification: Classification,
    pub parameter_error: Option<ParameterErrorEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub timestamp_s: f64,
    pub tests: Vec<Chi2Test>,
    pub step2_run: bool,
    pub findings: Vec<PhaseFinding>,
}

impl DetectionReport {
    pub fn detected(&self) -> bool {
        self.tests.iter().any(|t| t.detected)
    }

    pub fn test(&self, phase: Phase) -> Option<&Chi2Test> {
        self.tests.iter().find(|t| t.phase == phase)
    }

    pub fn finding(&self, phase: Phase) -> Option<&PhaseFinding> {
        self.findings.iter().find(|f| f.phase == phase)
    }

    /// Overall verdict: the finding of the phase with the largest step-1
    /// objective, or no-error.
    pub fn verdict(&self) -> Verdict {
        self.findings
            .iter()
            .max_by(|a, b| {
                let ja = self.test(a.phase).map_or(0.0, |t| t.j);
                let jb = self.test(b.phase).map_or(0.0, |t| t.j);
                ja.partial_cmp(&jb).unwrap_or(Ordering::Equal)
            })
            .map(|f| f.classification.verdict.clone())
            .unwrap_or(Verdict::NoError)
    }

    /// Table in the layout of the published CME^N listings.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for t in &self.tests {
            let verdict = if t.detected {
                "Bad data detected!"
            } else {
                "no bad data"
            };
            let cmp = if t.detected { ">" } else { "<=" };
            out.push_str(&format!(
                "J_{}(x) = {:.4} {} C = chi2_{{{},{}}} = {:.4} => {}\n",
                t.phase, t.j, cmp, t.dof, t.p, t.threshold, verdict
            ));
        }
        for f in &self.findings {
            out.push_str(&format!(
                "\nphase {} step 2: J = {:.4}, verdict {}\n",
                f.phase,
                f.step2_objective,
                f.classification.verdict.name()
            ));
            match &f.classification.verdict {
                Verdict::ParameterError {
                    branches,
                    suspected_bus,
                    ..
                } => {
                    let b: Vec<String> = branches.iter().map(|(a, b)| format!("{a}-{b}")).collect();
                    out.push_str(&format!(
                        "suspected lateral at bus {suspected_bus} (branches {})\n",
                        b.join(", ")
                    ));
                }
                Verdict::MultiCandidate { candidates, .. } => {
                    for c in candidates {
                        out.push_str(&format!(
                            "candidate: branch {}-{}, bus {} (review)\n",
                            c.branch.0, c.branch.1, c.suspected_bus
                        ));
                    }
                }
                _ => {}
            }
            out.push_str(&format!("{:<14}{:>10}{:>12}\n", "Measurement", "II", "CME^N"));
            for e in &f.ranking {
                out.push_str(&format!(
                    "{:<14}{:>10.4}{:>12.4}\n",
                    e.spec.label(),
                    e.innovation_index,
                    e.cme_n
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub step1: EstimationResult,
    pub step2: Option<EstimationResult>,
    pub report: DetectionReport,
}

/// Step 1 with magnitude-proportional weights and the chi-square test;
/// step 2 with meter precision, ranking and classification only when step
/// 1 detects. Failures carry the step number.
pub fn two_step_pipeline(
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    measurements: &MeasurementSet,
    config: &PipelineConfig,
    x0: Option<&[Option<PhaseState>]>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let opts = config.options();
    let tag = |step: u8| move |e: Error| Error::Step { step, source: Box::new(e) };

    let w1 = WeightingStep::One {
        fraction: config.step1_fraction,
    };
    let step1 = wls_estimate_with(topology, plan, measurements, &w1, x0, &opts).map_err(tag(1))?;
    let tests = detect(&step1, config.p, config.dof).map_err(tag(1))?;

    let mut report = DetectionReport {
        timestamp_s: measurements.timestamp_s,
        tests,
        step2_run: false,
        findings: Vec::new(),
    };
    if !report.detected() {
        return Ok(PipelineOutcome {
            step1,
            step2: None,
            report,
        });
    }

    let w2 = WeightingStep::Two {
        precision: config.precision,
    };
    let warm = step1.states();
    let step2 = wls_estimate_with(topology, plan, measurements, &w2, Some(&warm), &opts).map_err(tag(2))?;
    report.step2_run = true;
    for t in report.tests.iter().filter(|t| t.detected) {
        let Some(pe) = step2.phase(t.phase) else { continue };
        let ranking = rank_cme(pe, plan, config.beta);
        let classification = classify(&ranking, config.beta);
        let parameter_error = classification
            .verdict
            .suspected_bus()
            .and_then(|bus| lateral_conductance_error(pe, plan, bus).ok());
        report.findings.push(PhaseFinding {
            phase: t.phase,
            step2_objective: pe.objective,
            ranking,
            classification,
            parameter_error,
        });
    }
    Ok(PipelineOutcome {
        step1,
        step2: Some(step2),
        report,
    })
}
