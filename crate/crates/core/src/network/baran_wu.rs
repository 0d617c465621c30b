use super::{Branch, Bus, BusKind, NetworkTopology, PhaseLoad};

/// (from, to, r ohm, x ohm)
const BRANCHES: [(u32, u32, f64, f64); 32] = [
    (1, 2, 0.0922, 0.0470),
    (2, 3, 0.4930, 0.2511),
    (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070),
    (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351),
    (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650),
    (11, 12, 0.3744, 0.1238),
    (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129),
    (14, 15, 0.5910, 0.5260),
    (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740),
    (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554),
    (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083),
    (23, 24, 0.8980, 0.7091),
    (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034),
    (26, 27, 0.2842, 0.1447),
    (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585),
    (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619),
    (32, 33, 0.3410, 0.5302),
];

/// Three-phase bus loads (kW, kvar), bus 1 first.
const LOADS: [(f64, f64); 33] = [
    (0.0, 0.0),
    (100.0, 60.0),
    (90.0, 40.0),
    (120.0, 80.0),
    (60.0, 30.0),
    (60.0, 20.0),
    (200.0, 100.0),
    (200.0, 100.0),
    (60.0, 20.0),
    (60.0, 20.0),
    (45.0, 30.0),
    (60.0, 35.0),
    (60.0, 35.0),
    (120.0, 80.0),
    (60.0, 10.0),
    (60.0, 20.0),
    (60.0, 20.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 40.0),
    (90.0, 50.0),
    (420.0, 200.0),
    (420.0, 200.0),
    (60.0, 25.0),
    (60.0, 25.0),
    (60.0, 20.0),
    (120.0, 70.0),
    (200.0, 600.0),
    (150.0, 70.0),
    (210.0, 100.0),
    (60.0, 40.0),
];

pub const BARAN_WU_KV: f64 = 12.66;

/// The 33-bus, 32-branch Baran–Wu feeder at 12.66 kV with balanced loads.
///
/// The published three-phase loads are split evenly over the phases.
pub fn builtin_baran_wu_33() -> NetworkTopology {
    let buses = LOADS
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| {
            let per_phase = PhaseLoad::new(p / 3.0, q / 3.0);
            Bus {
                id: i as u32 + 1,
                kind: if i == 0 {
                    BusKind::Substation
                } else {
                    BusKind::Load
                },
                base_kv: BARAN_WU_KV,
                load_per_phase: [per_phase; 3],
            }
        })
        .collect();
    let branches = BRANCHES
        .iter()
        .map(|&(f, t, r, x)| Branch::closed(f, t, r, x))
        .collect();
    NetworkTopology {
        name: "baran-wu-33".into(),
        base_mva: 1.0,
        buses,
        branches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_totals() {
        let net = builtin_baran_wu_33();
        assert_eq!(net.buses.len(), 33);
        assert_eq!(net.branches.len(), 32);
        assert_eq!(net.closed_branches().count(), 32);
        assert!(net.buses.iter().all(|b| b.base_kv == 12.66));
        let p: f64 = net
            .buses
            .iter()
            .map(|b| b.load_per_phase.iter().map(|l| l.p_kw).sum::<f64>())
            .sum();
        let q: f64 = net
            .buses
            .iter()
            .map(|b| b.load_per_phase.iter().map(|l| l.q_kvar).sum::<f64>())
            .sum();
        assert!((p - 3715.0).abs() < 1e-9);
        assert!((q - 2300.0).abs() < 1e-9);
        net.validate_full().unwrap();
    }
}
