mod common;

use common::{chi2_cdf_quadrature, chi2_quantile_quadrature};
use hifdet::chi2::{chi2_cdf, chi2_threshold};

#[test]
fn quadrature_oracle_reproduces_table_value() {
    // sanity of the oracle itself
    assert!((chi2_quantile_quadrature(1, 0.95) - 3.8415).abs() < 1e-4);
}

#[test]
fn threshold_matches_quadrature() {
    for (dof, p) in [(1, 0.95), (2, 0.5), (7, 0.99), (65, 0.95), (130, 0.9), (195, 0.95), (195, 0.99)] {
        let ours = chi2_threshold(dof, p).unwrap();
        let oracle = chi2_quantile_quadrature(dof, p);
        assert!((ours - oracle).abs() < 1e-6 * oracle.max(1.0), "dof {dof} p {p}: {ours} vs {oracle}");
    }
}

#[test]
fn cdf_matches_quadrature() {
    for (dof, x) in [(1, 0.3), (1, 3.84), (5, 4.0), (195, 180.0), (195, 228.58), (400, 450.0)] {
        let a = chi2_cdf(dof, x);
        let b = chi2_cdf_quadrature(dof, x);
        assert!((a - b).abs() < 1e-9, "dof {dof} x {x}: {a} vs {b}");
    }
}

#[test]
fn published_threshold() {
    let t = chi2_threshold(195, 0.95).unwrap();
    assert!((t - 228.5799).abs() < 1e-3, "{t}");
}
