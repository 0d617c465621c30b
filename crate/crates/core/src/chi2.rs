//! Chi-square quantiles for the bad-data test.

use crate::error::{Error, Result};
use statrs::function::gamma::{gamma_lr, ln_gamma};

/// Chi-square CDF, `P(k/2, x/2)`.
pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

fn ln_pdf(k: f64, x: f64) -> f64 {
    (k / 2.0 - 1.0) * x.ln() - x / 2.0 - (k / 2.0) * std::f64::consts::LN_2 - ln_gamma(k / 2.0)
}

/// Inverse chi-square CDF: the value `c` with `P(X <= c) = p` for `dof`
/// degrees of freedom.
pub fn chi2_threshold(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::config("dof", "must be at least 1"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("p", format!("{p} is not in (0, 1)")));
    }
    let k = dof as f64;
    // Wilson-Hilferty start
    let z = normal_quantile(p);
    let a = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - a + z * a.sqrt()).powi(3)).max(1e-8);
    for _ in 0..100 {
        let f = chi2_cdf(dof, x) - p;
        let dens = ln_pdf(k, x).exp();
        if !(dens > 0.0) {
            break;
        }
        let next = (x - f / dens).clamp(x / 4.0, x * 4.0);
        let done = (next - x).abs() <= 1e-13 * x;
        x = next;
        if done {
            break;
        }
    }
    Ok(x)
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}
