//! Per-phase weighted-least-squares state estimation with the
//! innovation-based error decomposition.
//!
//! For each phase the Newton iteration
//! `dx = (H' W H)^-1 H' W (z - h(x))` runs to convergence, after which the
//! projection matrix `K = H (H' W H)^-1 H' W` is evaluated at the estimate.
//! Its diagonal gives each measurement's innovation index
//! `II = sqrt(1 - K_ii) / sqrt(K_ii)`, and the composed measurement error
//! `CME = r sqrt(1 + 1 / II^2)` recovers the part of the error hidden from
//! the residual.

use crate::error::{Error, Result};
use crate::model::{PhaseModel, Resolved};
pub use crate::model::PhaseState;
use crate::network::{BusId, MeasurementPlan, MeasurementSpec, MeterPrecision, NetworkTopology, Phase};
use crate::sim::{relative_sigma, MeasurementSet};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Clamp applied to `K_ii` before the innovation index.
pub const K_EPS: f64 = 1e-12;
/// `K_ii` above `1 - CRITICAL_TOL` marks a critical measurement.
pub const CRITICAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum WeightingStep {
    /// Every measurement weighted by a fraction of its own magnitude.
    One { fraction: f64 },
    /// Meter precision per measurement type.
    Two { precision: MeterPrecision },
}

impl WeightingStep {
    pub fn one() -> Self {
        WeightingStep::One { fraction: 0.01 }
    }

    pub fn two(precision: MeterPrecision) -> Self {
        WeightingStep::Two { precision }
    }

    pub fn number(&self) -> u8 {
        match self {
            WeightingStep::One { .. } => 1,
            WeightingStep::Two { .. } => 2,
        }
    }

    pub fn sigma(&self, spec: &MeasurementSpec, z: f64) -> f64 {
        match self {
            WeightingStep::One { fraction } => relative_sigma(z, *fraction),
            WeightingStep::Two { precision } => precision.sigma(spec, z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Jacobian, weights and projection matrix at one state.
#[derive(Debug, Clone)]
pub struct GainFactors {
    pub h: DMatrix<f64>,
    /// Diagonal of `R^-1`.
    pub r_inv: DVector<f64>,
    pub k: DMatrix<f64>,
}

/// Estimate and analytics for one phase. Vectors are aligned with
/// `plan_indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimate {
    pub phase: Phase,
    pub plan_indices: Vec<usize>,
    pub labels: Vec<String>,
    /// Bus id of each state entry.
    pub bus_ids: Vec<BusId>,
    pub state: PhaseState,
    pub measured: Vec<f64>,
    pub estimated: Vec<f64>,
    pub residual: Vec<f64>,
    pub sigma: Vec<f64>,
    pub k_diag: Vec<f64>,
    pub innovation_index: Vec<f64>,
    pub cme: Vec<f64>,
    pub cme_n: Vec<f64>,
    pub critical: Vec<bool>,
    /// `sum (CME_i / sigma_i)^2`.
    pub objective: f64,
    /// Classical `sum (r_i / sigma_i)^2`.
    pub residual_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PhaseEstimate {
    pub fn measurement_count(&self) -> usize {
        self.plan_indices.len()
    }

    /// Rebuilds the full gain factors at the estimate.
    pub fn gain_factors(&self, topology: &NetworkTopology, plan: &MeasurementPlan) -> Result<GainFactors> {
        let model = PhaseModel::new(topology)?;
        let specs: Vec<&MeasurementSpec> = self.plan_indices.iter().map(|&i| &plan.specs[i]).collect();
        let resolved = model.resolve_all(specs.iter().copied())?;
        let (h, _) = jacobian_and_values(&model, &resolved, &self.state);
        let r_inv = DVector::from_iterator(self.sigma.len(), self.sigma.iter().map(|s| 1.0 / (s * s)));
        let k = projection_matrix(&h, &r_inv).map_err(|_| Error::Unobservable { phase: self.phase })?;
        Ok(GainFactors { h, r_inv, k })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub step: u8,
    pub timestamp_s: f64,
    /// Phases that carry measurements, in phase order.
    pub phases: Vec<PhaseEstimate>,
}

impl EstimationResult {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseEstimate> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn converged(&self) -> bool {
        self.phases.iter().all(|p| p.converged)
    }

    /// Objective over all phases at once.
    pub fn joint_objective(&self) -> f64 {
        self.phases
            .iter()
            .flat_map(|p| p.cme.iter().zip(&p.sigma).map(|(c, s)| (c / s).powi(2)))
            .sum()
    }

    pub fn states(&self) -> Vec<Option<PhaseState>> {
        Phase::ALL
            .iter()
            .map(|&ph| self.phase(ph).map(|p| p.state.clone()))
            .collect()
    }
}

/// Phase-indexed views of a result; a phase without measurements reports an
/// observability failure.
pub fn per_phase_decompose(result: &EstimationResult) -> [Result<&PhaseEstimate>; 3] {
    Phase::ALL.map(|ph| result.phase(ph).ok_or(Error::Unobservable { phase: ph }))
}

fn jacobian_and_values(model: &PhaseModel, resolved: &[Resolved], x: &PhaseState) -> (DMatrix<f64>, Vec<f64>) {
    let cols = model.state_len();
    let mut h = DMatrix::zeros(resolved.len(), cols);
    let mut row = vec![0.0; cols];
    let mut values = Vec::with_capacity(resolved.len());
    for (i, m) in resolved.iter().enumerate() {
        model.jacobian_row(m, x, &mut row);
        for (c, v) in row.iter().enumerate() {
            h[(i, c)] = *v;
        }
        values.push(model.value(m, x));
    }
    (h, values)
}

/// Thin QR of `W^1/2 H`; `None` when the gain matrix is numerically
/// singular.
struct WeightedQr {
    sqrt_w: DVector<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl WeightedQr {
    fn new(h: &DMatrix<f64>, r_inv: &DVector<f64>) -> Option<Self> {
        if h.nrows() < h.ncols() {
            return None;
        }
        let sqrt_w = r_inv.map(f64::sqrt);
        let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * sqrt_w[i]);
        let qr = scaled.qr();
        let r = qr.r();
        let (lo, hi) = r
            .diagonal()
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
        // reciprocal condition estimate of the gain matrix H' W H
        if !(lo > 0.0) || (lo / hi).powi(2) < 1e-14 {
            return None;
        }
        Some(Self { sqrt_w, q: qr.q(), r })
    }

    /// Weighted least-squares step for residual `res`.
    fn solve(&self, res: &[f64]) -> DVector<f64> {
        let b = DVector::from_iterator(res.len(), res.iter().zip(self.sqrt_w.iter()).map(|(r, s)| r * s));
        let rhs = self.q.transpose() * b;
        self.r
            .solve_upper_triangular(&rhs)
            .expect("triangular factor checked non-singular")
    }

    /// `K = W^-1/2 Q Q' W^1/2`.
    fn projection(&self) -> DMatrix<f64> {
        let qqt = &self.q * self.q.transpose();
        DMatrix::from_fn(qqt.nrows(), qqt.ncols(), |i, j| qqt[(i, j)] * self.sqrt_w[j] / self.sqrt_w[i])
    }
}

/// `K = H (H' W H)^-1 H' W` with `W = diag(r_inv)`.
pub fn projection_matrix(h: &DMatrix<f64>, r_inv: &DVector<f64>) -> Result<DMatrix<f64>> {
    let qr = WeightedQr::new(h, r_inv).ok_or(Error::Unobservable { phase: Phase::A })?;
    Ok(qr.projection())
}

/// Solution of the linear problem `min (z - H x)' W (z - H x)`, through
/// the same factorization as the Gauss-Newton step.
pub fn linear_wls(h: &DMatrix<f64>, r_inv: &DVector<f64>, z: &[f64]) -> Result<DVector<f64>> {
    let qr = WeightedQr::new(h, r_inv).ok_or(Error::Unobservable { phase: Phase::A })?;
    Ok(qr.solve(z))
}

/// Innovation index from a projection diagonal entry.
///
/// `K_ii = 0` gives `+inf`; `K_ii >= 1` is a critical measurement.
pub fn innovation_index(k_ii: f64) -> Result<f64> {
    if k_ii.is_nan() || k_ii >= 1.0 {
        return Err(Error::CriticalMeasurement(k_ii));
    }
    if k_ii <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((1.0 - k_ii).sqrt() / k_ii.sqrt())
}

/// Composed measurement error and its normalized form.
pub fn cme(r: f64, ii: f64, sigma: f64) -> (f64, f64) {
    let c = if ii.is_infinite() {
        r
    } else {
        r * (1.0 + 1.0 / (ii * ii)).sqrt()
    };
    (c, c / sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    /// Residual-visible part, equal to the residual.
    pub detectable: Vec<f64>,
    /// Magnitude of the masked part per measurement, `|r_i| / II_i`.
    pub undetectable_magnitude: Vec<f64>,
    pub innovation_index: Vec<f64>,
}

/// Splits the error seen through the residual into detectable and masked
/// parts using only the projection diagonal.
pub fn decompose_error(r: &[f64], k_diag: &[f64]) -> ErrorDecomposition {
    let ii: Vec<f64> = k_diag
        .iter()
        .map(|&k| innovation_index(k.clamp(0.0, 1.0 - K_EPS)).unwrap_or(0.0))
        .collect();
    let undetectable_magnitude = r
        .iter()
        .zip(&ii)
        .map(|(ri, ii)| if ii.is_infinite() { 0.0 } else { ri.abs() / ii })
        .collect();
    ErrorDecomposition {
        detectable: r.to_vec(),
        undetectable_magnitude,
        innovation_index: ii,
    }
}

/// `(K e, (I - K) e)`: the masked and the detectable components of an
/// error vector.
pub fn split_error(e: &DVector<f64>, k: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let masked = k * e;
    let detectable = e - &masked;
    (masked, detectable)
}

/// Estimates one phase. `values` is aligned with the whole plan.
pub fn estimate_phase(
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    values: &[f64],
    phase: Phase,
    weighting: &WeightingStep,
    x0: Option<&PhaseState>,
    opts: &EstimatorOptions,
) -> Result<PhaseEstimate> {
    let model = PhaseModel::new(topology)?;
    let plan_indices = plan.phase_indices(phase);
    if plan_indices.is_empty() {
        return Err(Error::Unobservable { phase });
    }
    let specs: Vec<&MeasurementSpec> = plan_indices.iter().map(|&i| &plan.specs[i]).collect();
    let resolved = model.resolve_all(specs.iter().copied())?;
    let z: Vec<f64> = plan_indices.iter().map(|&i| values[i]).collect();
    let sigma: Vec<f64> = specs.iter().zip(&z).map(|(s, &zi)| weighting.sigma(s, zi)).collect();
    let r_inv = DVector::from_iterator(sigma.len(), sigma.iter().map(|s| 1.0 / (s * s)));

    let mut x = match x0 {
        Some(x) if x.len() == model.bus_count() => x.clone(),
        _ => PhaseState::flat(model.bus_count()),
    };
    let mut converged = false;
    let mut iterations = 0;
    let mut max_step = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        iterations = it;
        let (h, hx) = jacobian_and_values(&model, &resolved, &x);
        let qr = WeightedQr::new(&h, &r_inv).ok_or(Error::Unobservable { phase })?;
        let res: Vec<f64> = z.iter().zip(&hx).map(|(a, b)| a - b).collect();
        let dx = qr.solve(&res);
        model.apply_step(&mut x, dx.as_slice());
        max_step = dx.amax();
        if max_step < opts.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::EstimatorDivergence {
            phase,
            iterations,
            max_step,
            last: Box::new(x),
        });
    }

    let (h, hx) = jacobian_and_values(&model, &resolved, &x);
    let k = projection_matrix(&h, &r_inv).map_err(|_| Error::Unobservable { phase })?;
    let residual: Vec<f64> = z.iter().zip(&hx).map(|(a, b)| a - b).collect();
    let k_diag: Vec<f64> = (0..z.len()).map(|i| k[(i, i)]).collect();
    let critical: Vec<bool> = k_diag.iter().map(|&k| k > 1.0 - CRITICAL_TOL).collect();
    let innovation: Vec<f64> = k_diag
        .iter()
        .map(|&k| innovation_index(k.clamp(K_EPS, 1.0 - K_EPS)).expect("clamped below one"))
        .collect();
    let (cme_v, cme_n): (Vec<f64>, Vec<f64>) = residual
        .iter()
        .zip(&innovation)
        .zip(&sigma)
        .map(|((&r, &ii), &s)| cme(r, ii, s))
        .unzip();
    let objective = cme_n.iter().map(|c| c * c).sum();
    let residual_objective = residual.iter().zip(&sigma).map(|(r, s)| (r / s).powi(2)).sum();
    Ok(PhaseEstimate {
        phase,
        labels: specs.iter().map(|s| s.label()).collect(),
        plan_indices,
        bus_ids: (0..model.bus_count()).map(|i| model.bus_id(i)).collect(),
        state: x,
        measured: z,
        estimated: hx,
        residual,
        sigma,
        k_diag,
        innovation_index: innovation,
        cme: cme_v,
        cme_n,
        critical,
        objective,
        residual_objective,
        iterations,
        converged,
    })
}

/// Estimates every phase that carries measurements.
///
/// `x0`, when given, warm-starts each phase from a previous estimate.
pub fn wls_estimate(
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    measurements: &MeasurementSet,
    weighting: &WeightingStep,
    x0: Option<&[Option<PhaseState>]>,
) -> Result<EstimationResult> {
    wls_estimate_with(topology, plan, measurements, weighting, x0, &EstimatorOptions::default())
}

pub fn wls_estimate_with(
    topology: &NetworkTopology,
    plan: &MeasurementPlan,
    measurements: &MeasurementSet,
    weighting: &WeightingStep,
    x0: Option<&[Option<PhaseState>]>,
    opts: &EstimatorOptions,
) -> Result<EstimationResult> {
    measurements.check_aligned(plan)?;
    let mut phases = Vec::new();
    for phase in Phase::ALL {
        if plan.per_phase_count(phase) == 0 {
            continue;
        }
        let start = x0.and_then(|x| x.get(phase.index())).and_then(|x| x.as_ref());
        phases.push(estimate_phase(
            topology,
            plan,
            &measurements.values,
            phase,
            weighting,
            start,
            opts,
        )?);
    }
    Ok(EstimationResult {
        step: weighting.number(),
        timestamp_s: measurements.timestamp_s,
        phases,
    })
}
