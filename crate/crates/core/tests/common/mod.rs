//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use hifdet::network::{builtin_baran_wu_33, default_measurement_plan, MeasurementPlan, NetworkTopology, Phase, PhaseLoad};
use hifdet::powerflow::{solve_power_flow, PhasorSolution};
use hifdet::sim::{generate_measurements, MeasurementSet, NoiseModel};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Polar Newton-Raphson on the full bus admittance matrix of one phase,
/// with a central-difference Jacobian. Returns bus voltages in bus order.
pub fn newton_power_flow(net: &NetworkTopology, phase: Phase) -> Vec<Complex64> {
    let n = net.buses.len();
    let z_base = net.per_unit_base().z_ohm();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in net.branches.iter().filter(|b| b.is_closed()) {
        let f = net.bus_index(br.from).unwrap();
        let t = net.bus_index(br.to).unwrap();
        let yb = Complex64::new(br.r_ohm / z_base, br.x_ohm / z_base).inv();
        y[f][f] += yb;
        y[t][t] += yb;
        y[f][t] -= yb;
        y[t][f] -= yb;
    }
    let s_base_kva = net.base_mva * 1e3 / 3.0;
    let load: Vec<Complex64> = net
        .buses
        .iter()
        .map(|b| {
            let l = b.load_per_phase[phase.index()];
            Complex64::new(l.p_kw, l.q_kvar) / s_base_kva
        })
        .collect();
    let root = net.substation_index().unwrap();
    let pq: Vec<usize> = (0..n).filter(|&i| i != root).collect();
    let m = pq.len();

    let voltages = |x: &DVector<f64>| -> Vec<Complex64> {
        let mut v = vec![Complex64::new(1.0, 0.0); n];
        for (k, &i) in pq.iter().enumerate() {
            v[i] = Complex64::from_polar(x[m + k], x[k]);
        }
        v
    };
    let mismatch = |x: &DVector<f64>| -> DVector<f64> {
        let v = voltages(x);
        let mut out = DVector::zeros(2 * m);
        for (k, &i) in pq.iter().enumerate() {
            let inj: Complex64 = (0..n).map(|j| y[i][j] * v[j]).sum::<Complex64>().conj() * v[i];
            let d = inj + load[i];
            out[k] = d.re;
            out[m + k] = d.im;
        }
        out
    };

    let mut x = DVector::from_fn(2 * m, |i, _| if i < m { 0.0 } else { 1.0 });
    for _ in 0..30 {
        let f = mismatch(&x);
        if f.amax() < 1e-14 {
            break;
        }
        let h = 1e-7;
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for c in 0..2 * m {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let col = (mismatch(&xp) - mismatch(&xm)) / (2.0 * h);
            jac.set_column(c, &col);
        }
        let dx = jac.lu().solve(&(-f)).expect("nonsingular Jacobian");
        x += dx;
    }
    voltages(&x)
}

/// Per-phase random scaling of every bus load by factors in `[lo, hi]`.
pub fn random_loads(net: &NetworkTopology, seed: u64, lo: f64, hi: f64) -> NetworkTopology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loads: Vec<[PhaseLoad; 3]> = net
        .buses
        .iter()
        .map(|b| {
            b.load_per_phase.map(|l| PhaseLoad::new(l.p_kw * rng.random_range(lo..hi), l.q_kvar * rng.random_range(lo..hi)))
        })
        .collect();
    net.with_loads(&loads).unwrap()
}

/// Gamma function at `k/2` for a positive integer `k`, through the
/// recurrence from `Gamma(1) = 1` and `Gamma(1/2) = sqrt(pi)`; as a log.
fn ln_gamma_half(k: usize) -> f64 {
    let (mut x, mut acc) = if k % 2 == 0 { (1.0, 0.0) } else { (0.5, 0.5 * std::f64::consts::PI.ln()) };
    while x < k as f64 / 2.0 - 1e-12 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// Chi-square CDF by composite Simpson quadrature of the density after the
/// substitution `x = u^2`, which removes the singularity at zero for one
/// degree of freedom.
pub fn chi2_cdf_quadrature(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = dof as f64;
    let ln_norm = (k / 2.0) * std::f64::consts::LN_2 + ln_gamma_half(dof);
    let f = |u: f64| {
        if u == 0.0 {
            return if dof == 1 { 2.0 * (-ln_norm).exp() } else { 0.0 };
        }
        (2.0f64.ln() + (k - 1.0) * u.ln() - u * u / 2.0 - ln_norm).exp()
    };
    let b = x.sqrt();
    let n = 40_000;
    let h = b / n as f64;
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    s * h / 3.0
}

/// Quantile of the quadrature CDF by bisection.
pub fn chi2_quantile_quadrature(dof: usize, p: f64) -> f64 {
    let k = dof as f64;
    let (mut lo, mut hi) = (0.0, k + 20.0 * (2.0 * k).sqrt() + 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf_quadrature(dof, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Normal-equation weighted least squares with an explicit inverse.
pub fn closed_form_wls(h: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let wm = DMatrix::from_diagonal(w);
    let g = h.transpose() * &wm * h;
    let g_inv = g.try_inverse().expect("observable toy");
    let x = &g_inv * h.transpose() * &wm * z;
    let k = h * g_inv * h.transpose() * wm;
    (x, k)
}

pub struct Snapshot {
    pub net: NetworkTopology,
    pub plan: MeasurementPlan,
    pub solution: PhasorSolution,
    pub measurements: MeasurementSet,
}

/// Base feeder with randomized loads and 1 %-of-reading noise.
pub fn random_snapshot(seed: u64) -> Snapshot {
    let net = random_loads(&builtin_baran_wu_33(), seed, 0.6, 1.4);
    let plan = default_measurement_plan(&net).unwrap();
    let solution = solve_power_flow(&net, None).unwrap();
    let measurements = generate_measurements(&solution, &net, &plan, NoiseModel::default(), seed ^ 0xabcd, 0.0).unwrap();
    Snapshot {
        net,
        plan,
        solution,
        measurements,
    }
}

/// Subset of a measurement set, aligned with `indices`.
pub fn subset(set: &MeasurementSet, indices: &[usize]) -> MeasurementSet {
    MeasurementSet {
        timestamp_s: set.timestamp_s,
        values: indices.iter().map(|&i| set.values[i]).collect(),
        truth: indices.iter().map(|&i| set.truth[i]).collect(),
        noise_sigma: indices.iter().map(|&i| set.noise_sigma[i]).collect(),
        sm_timestamp_s: indices.iter().map(|&i| set.sm_timestamp_s[i]).collect(),
    }
}

/// Largest |H' W r| and largest cosine between the whitened residual
/// `W^1/2 r` and a whitened Jacobian column `W^1/2 h_j`.
pub fn orthogonality(h: &DMatrix<f64>, r_inv: &DVector<f64>, r: &[f64]) -> (f64, f64) {
    let sw = r_inv.map(f64::sqrt);
    let rt = DVector::from_iterator(r.len(), r.iter().zip(sw.iter()).map(|(a, s)| a * s));
    let ht = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * sw[i]);
    let g = ht.transpose() * &rt;
    let rn = rt.norm();
    let cos = (0..h.ncols())
        .map(|j| g[j].abs() / (ht.column(j).norm() * rn))
        .fold(0.0, f64::max);
    (g.amax(), cos)
}
