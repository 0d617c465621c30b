mod common;

use hifdet::analytics::{
    detect, estimate_parameter_error, generate_synthetic, lateral_conductance_error, synthetic_quota, vi_scores, DofConvention,
};
use hifdet::estimator::{estimate_phase, projection_matrix, wls_estimate, EstimatorOptions, WeightingStep, CRITICAL_TOL};
use hifdet::hif::HifScenario;
use hifdet::network::{
    builtin_baran_wu_33, default_measurement_plan, Branch, Bus, BusKind, Location, MeasurementKind, MeasurementPlan,
    MeasurementSpec, MeterPrecision, NetworkTopology, Phase, PhaseLoad,
};
use hifdet::powerflow::solve_power_flow;
use hifdet::sim::{generate_measurements, NoiseModel};
use nalgebra::{DMatrix, DVector};

use MeasurementKind::*;

fn three_bus() -> NetworkTopology {
    let bus = |id, kind| Bus {
        id,
        kind,
        base_kv: 12.66,
        load_per_phase: [PhaseLoad::new(100.0, 40.0); 3],
    };
    NetworkTopology {
        name: "three".into(),
        base_mva: 1.0,
        buses: vec![bus(1, BusKind::Substation), bus(2, BusKind::Load), bus(3, BusKind::Load)],
        branches: vec![Branch::closed(1, 2, 0.9, 0.5), Branch::closed(2, 3, 1.2, 0.8)],
    }
}

#[test]
fn vi_matches_brute_force_double_sum() {
    let net = three_bus();
    let specs = vec![
        MeasurementSpec::new(PFlow, Location::Branch { from: 1, to: 2 }, Phase::A, 0.01),
        MeasurementSpec::new(PInj, Location::Bus(2), Phase::A, 0.01),
        MeasurementSpec::new(VMag, Location::Bus(3), Phase::A, 0.01),
    ];
    let h = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, 0.4, 1.0, 0.0, 2.0]);
    let w = DVector::from_row_slice(&[1.0, 4.0, 0.5]);
    let k = projection_matrix(&h, &w).unwrap();

    let scores = vi_scores(&k, &specs, &net);
    for s in &scores {
        let incident: Vec<usize> = (0..3).filter(|&l| specs[l].buses().contains(&s.bus)).collect();
        let mut total = 0.0;
        for &l in &incident {
            for j in 0..3 {
                let s_r = if l == j { 1.0 } else { 0.0 } - k[(l, j)];
                let s_cme = s_r / (1.0 - k[(l, l)]).sqrt();
                total += (s_cme - s_r) * (s_cme - s_r);
            }
        }
        let expected = if incident.is_empty() { 0.0 } else { (total / incident.len() as f64).sqrt() };
        assert!((s.vi - expected).abs() < 1e-12, "bus {}: {} vs {expected}", s.bus, s.vi);
        assert!(s.vi >= 0.0);
    }
}

#[test]
#[ignore = "does not hold for the default plan: leaf measurements are mutually redundant (low K_ll), so leaves rank lowest in VI"]
fn leaf_laterals_rank_in_top_vi_decile() {
    let net = builtin_baran_wu_33();
    let plan = default_measurement_plan(&net).unwrap();
    let sol = solve_power_flow(&net, None).unwrap();
    let m = generate_measurements(&sol, &net, &plan, NoiseModel::None, 0, 0.0).unwrap();
    let est = wls_estimate(&net, &plan, &m, &WeightingStep::one(), None).unwrap();
    let pe = est.phase(Phase::A).unwrap();
    let g = pe.gain_factors(&net, &plan).unwrap();
    let specs: Vec<_> = pe.plan_indices.iter().map(|&i| plan.specs[i]).collect();
    let mut vi = vi_scores(&g.k, &specs, &net);
    vi.sort_by(|a, b| b.vi.total_cmp(&a.vi));
    let decile = (net.buses.len() as f64 / 10.0).ceil() as usize;
    let top: Vec<u32> = vi.iter().take(decile).map(|s| s.bus).collect();

    // oracle: load buses with the fewest incident measurements
    let count = |bus: u32| specs.iter().filter(|s| s.buses().contains(&bus)).count();
    let min = net.buses.iter().filter(|b| b.kind == BusKind::Load).map(|b| count(b.id)).min().unwrap();
    let sparse: Vec<u32> = net
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Load && count(b.id) == min)
        .map(|b| b.id)
        .collect();
    assert_eq!(sparse, vec![18, 22, 25, 33]);
    for bus in &sparse {
        assert!(top.contains(bus), "leaf {bus} not in top decile {top:?}");
    }
}

#[test]
fn vi_follows_leverage_of_incident_measurements() {
    // with a whitened projection, sum_j (S_cme - S_r)^2 over row l reduces
    // to (1 - sqrt(1 - K_ll))^2, so VI orders buses by incident leverage
    let net = builtin_baran_wu_33();
    let plan = default_measurement_plan(&net).unwrap();
    let sol = solve_power_flow(&net, None).unwrap();
    let m = generate_measurements(&sol, &net, &plan, NoiseModel::None, 0, 0.0).unwrap();
    let est = wls_estimate(&net, &plan, &m, &WeightingStep::two(MeterPrecision::default()), None).unwrap();
    let pe = est.phase(Phase::B).unwrap();
    let g = pe.gain_factors(&net, &plan).unwrap();
    let n = g.k.nrows();
    let kw = DMatrix::from_fn(n, n, |i, j| g.k[(i, j)] * (g.r_inv[i] / g.r_inv[j]).sqrt());
    let specs: Vec<_> = pe.plan_indices.iter().map(|&i| plan.specs[i]).collect();
    for s in vi_scores(&kw, &specs, &net) {
        let rows: Vec<usize> = (0..n).filter(|&l| specs[l].buses().contains(&s.bus)).collect();
        let mean = rows.iter().map(|&l| (1.0 - (1.0 - kw[(l, l)]).sqrt()).powi(2)).sum::<f64>() / rows.len() as f64;
        assert!((s.vi - mean.sqrt()).abs() < 1e-9, "bus {}", s.bus);
    }
}

/// Default plan with bus 18 seen only through the 17->18 flows, which
/// makes that pair critical.
fn plan_with_critical_pair(net: &NetworkTopology) -> MeasurementPlan {
    let plan = default_measurement_plan(net).unwrap();
    MeasurementPlan::new(
        plan.specs
            .into_iter()
            .filter(|s| s.phase == Phase::A)
            .filter(|s| !matches!(s.at_bus(), Some(17) | Some(18)))
            .filter(|s| s.location != Location::Branch { from: 18, to: 17 })
            .collect(),
    )
}

#[test]
fn synthetic_injections_remove_criticality() {
    let net = builtin_baran_wu_33();
    let plan = plan_with_critical_pair(&net);
    let sol = solve_power_flow(&net, None).unwrap();
    let m = generate_measurements(&sol, &net, &plan, NoiseModel::default(), 3, 0.0).unwrap();
    let opts = EstimatorOptions::default();
    let pe = estimate_phase(&net, &plan, &m.values, Phase::A, &WeightingStep::one(), None, &opts).unwrap();
    let critical: Vec<String> = pe
        .plan_indices
        .iter()
        .zip(&pe.critical)
        .filter(|(_, &c)| c)
        .map(|(&i, _)| plan.specs[i].full_label())
        .collect();
    assert_eq!(critical, vec!["P:17-18:A", "Q:17-18:A"]);

    let g = pe.gain_factors(&net, &plan).unwrap();
    let specs: Vec<_> = pe.plan_indices.iter().map(|&i| plan.specs[i]).collect();
    let vi = vi_scores(&g.k, &specs, &net);
    let sm = generate_synthetic(Some(&pe), &net, &plan, &vi, 0, &MeterPrecision::default(), Some(0.0)).unwrap();
    assert!(sm.specs.iter().any(|s| s.at_bus() == Some(18)));
    assert!(sm.specs.iter().all(|s| matches!(s.at_bus(), Some(17) | Some(18))));

    let (plan2, m2) = sm.augment(&plan, &m);
    let pe2 = estimate_phase(&net, &plan2, &m2.values, Phase::A, &WeightingStep::one(), Some(&pe.state), &opts).unwrap();
    for (k, &i) in pe2.plan_indices.iter().enumerate() {
        if plan2.specs[i].buses().contains(&18) {
            assert!(pe2.k_diag[k] < 1.0 - CRITICAL_TOL, "{} still critical", plan2.specs[i].full_label());
        }
    }
    assert!(pe2.critical.iter().all(|&c| !c));
}

#[test]
fn full_plan_keeps_declared_grl() {
    let net = builtin_baran_wu_33();
    let plan = default_measurement_plan(&net).unwrap();
    for phase in Phase::ALL {
        assert!((plan.grl(phase, &net) - 3.0).abs() < 1e-12);
        assert_eq!(synthetic_quota(&plan, phase, &net, 3.0), 0);
    }
}

#[test]
fn taylor_parameter_error_is_second_order_accurate() {
    // P = V^2 / r through a lateral resistance r; H_p0 = dP/dr = -V^2 / r0^2
    let (v, r0) = (0.95, 80.0);
    let h = |r: f64| v * v / r;
    let h_p0 = -v * v / (r0 * r0);
    for dr in [-8.0, -2.0, -0.5, 0.5, 2.0, 8.0] {
        let est = estimate_parameter_error(h(r0 + dr), h(r0), h_p0).unwrap();
        let err = est.delta_p - dr;
        // exact first-order remainder: -dr^2 / (r0 + dr)
        assert!((err + dr * dr / (r0 + dr)).abs() < 1e-9, "dr {dr}: err {err}");
        assert!(err.abs() <= 1.2 * dr * dr / r0);
    }
    assert_eq!(estimate_parameter_error(0.3, 0.3, 1.0).unwrap().delta_p, 0.0);
    assert!(estimate_parameter_error(0.3, 0.2, 1e-13).is_err());
}

#[test]
fn fault_bus_injection_reads_as_added_conductance() {
    let net = builtin_baran_wu_33();
    let plan = default_measurement_plan(&net).unwrap();
    let sc = HifScenario::lateral(20, Phase::A, 820.0);
    let sol = solve_power_flow(&net, Some((&sc, 1.2))).unwrap();
    let m = generate_measurements(&sol, &net, &plan, NoiseModel::None, 0, 1.2).unwrap();
    let est = wls_estimate(&net, &plan, &m, &WeightingStep::two(MeterPrecision::default()), None).unwrap();
    let pe = est.phase(Phase::A).unwrap();
    let dp = lateral_conductance_error(pe, &plan, 20).unwrap();
    assert_eq!(dp.label, "P:20:A");

    // ground truth: conductance that draws the fault's real power
    let ph = sol.phase(Phase::A);
    let bus = ph.hif_bus.unwrap();
    let g_true = ph.hif_draw.re / ph.v[bus].norm_sqr();
    assert!(g_true > 0.0);
    assert_eq!(dp.delta_p.signum(), g_true.signum(), "{dp:?} vs {g_true}");
}

#[test]
fn detection_is_exactly_j_above_threshold() {
    let snap = common::random_snapshot(11);
    let est = wls_estimate(&snap.net, &snap.plan, &snap.measurements, &WeightingStep::one(), None).unwrap();
    for convention in [DofConvention::MeasurementCount, DofConvention::Redundancy] {
        for t in detect(&est, 0.95, convention).unwrap() {
            assert_eq!(t.detected, t.j > t.threshold);
        }
    }
}
