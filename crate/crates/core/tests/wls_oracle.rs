mod common;

use common::closed_form_wls;
use hifdet::estimator::{estimate_phase, linear_wls, projection_matrix, EstimatorOptions, WeightingStep};
use hifdet::network::{
    Branch, Bus, BusKind, Location, MeasurementKind, MeasurementPlan, MeasurementSpec, NetworkTopology, Phase, PhaseLoad,
};
use hifdet::powerflow::solve_power_flow;
use hifdet::sim::{generate_measurements, NoiseModel};
use nalgebra::{DMatrix, DVector};

/// Three buses, states `(x1, x2, x3)`: two "voltages" and a "flow" per
/// branch, all linear.
fn toy() -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let h = DMatrix::from_row_slice(
        6,
        3,
        &[
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, //
            4.0, -4.0, 0.0, //
            0.0, 2.5, -2.5, //
            -4.0, 4.0, 0.0,
        ],
    );
    let sigma = [0.004, 0.01, 0.004, 0.008, 0.008, 0.02];
    let w = DVector::from_iterator(6, sigma.iter().map(|s| 1.0 / (s * s)));
    let z = DVector::from_row_slice(&[1.002, 0.981, 0.975, 0.083, 0.016, -0.077]);
    (h, w, z)
}

#[test]
fn linear_toy_matches_closed_form() {
    let (h, w, z) = toy();
    let (x_ref, k_ref) = closed_form_wls(&h, &w, &z);
    let x = linear_wls(&h, &w, z.as_slice()).unwrap();
    assert!((&x - &x_ref).amax() < 1e-10, "{x} vs {x_ref}");
    let k = projection_matrix(&h, &w).unwrap();
    assert!((&k - &k_ref).amax() < 1e-10);
    assert!((k.trace() - 3.0).abs() < 1e-12);
}

#[test]
fn linear_toy_residual_is_orthogonal() {
    let (h, w, z) = toy();
    let x = linear_wls(&h, &w, z.as_slice()).unwrap();
    let r = &z - &h * &x;
    let g = h.transpose() * r.component_mul(&w);
    assert!(g.amax() < 1e-8, "{g}");
}

fn three_bus() -> NetworkTopology {
    let bus = |id, kind, p, q| Bus {
        id,
        kind,
        base_kv: 12.66,
        load_per_phase: [PhaseLoad::new(p, q); 3],
    };
    NetworkTopology {
        name: "three".into(),
        base_mva: 1.0,
        buses: vec![
            bus(1, BusKind::Substation, 0.0, 0.0),
            bus(2, BusKind::Load, 120.0, 60.0),
            bus(3, BusKind::Load, 80.0, 30.0),
        ],
        branches: vec![Branch::closed(1, 2, 0.9, 0.5), Branch::closed(2, 3, 1.2, 0.8)],
    }
}

#[test]
fn three_bus_network_estimate_recovers_power_flow() {
    use MeasurementKind::*;
    let net = three_bus();
    let s = |k, l| MeasurementSpec::new(k, l, Phase::A, 0.01);
    let plan = MeasurementPlan::new(vec![
        s(VMag, Location::Bus(1)),
        s(PInj, Location::Bus(2)),
        s(QInj, Location::Bus(2)),
        s(PInj, Location::Bus(3)),
        s(QInj, Location::Bus(3)),
        s(PFlow, Location::Branch { from: 1, to: 2 }),
        s(QFlow, Location::Branch { from: 1, to: 2 }),
    ]);
    let sol = solve_power_flow(&net, None).unwrap();
    let m = generate_measurements(&sol, &net, &plan, NoiseModel::None, 0, 0.0).unwrap();
    let est = estimate_phase(&net, &plan, &m.values, Phase::A, &WeightingStep::one(), None, &EstimatorOptions::default()).unwrap();
    for (i, v) in sol.phase(Phase::A).v.iter().enumerate() {
        assert!((est.state.phasor(i) - v).norm() < 1e-10);
    }
    assert!(est.objective < 1e-12);
}
