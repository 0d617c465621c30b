//! High-impedance fault model.
//!
//! The fault path is a time-varying resistance in series with two
//! antiparallel diodes, each backed by its own DC source. The positive
//! half-cycle conducts once the voltage exceeds `v_p`, the negative
//! half-cycle once it drops below `-v_n`. Unequal sources give the
//! half-cycle asymmetry; the dead band between them gives the
//! nonlinearity. Build-up and shoulder come from the resistance profile and
//! intermittency from a window in which the resistance jumps to a blocking
//! value.
//!
//! The waveform is evaluated one fundamental cycle at a time with the
//! resistance held constant over the cycle, and reduced to its fundamental
//! phasor so that it can be folded into a quasi-static power flow.

use crate::error::{Error, Result};
use crate::network::{BusId, Phase};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

pub const DEFAULT_SAMPLES_PER_CYCLE: usize = 128;
pub const DEFAULT_F0_HZ: f64 = 60.0;
pub const DEFAULT_R_OPEN_OHM: f64 = 1e9;
const MIN_SAMPLES_PER_CYCLE: usize = 32;
const MAX_POLY_DEGREE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntermittencyWindow {
    /// Seconds after fault inception.
    pub t_on_s: f64,
    pub t_off_s: f64,
}

impl IntermittencyWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_on_s && t < self.t_off_s
    }
}

/// Fault resistance over time.
///
/// During build-up the resistance follows a polynomial in normalized time
/// `s = t / buildup_duration_s`; `poly_coeffs[k]` multiplies `s^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfProfile {
    pub r_start_ohm: f64,
    pub r_shoulder_ohm: f64,
    pub buildup_duration_s: f64,
    pub poly_coeffs: Vec<f64>,
    #[serde(default)]
    pub intermittency: Option<IntermittencyWindow>,
    #[serde(default = "default_r_open")]
    pub r_open_ohm: f64,
}

fn default_r_open() -> f64 {
    DEFAULT_R_OPEN_OHM
}

/// Default blocking resistance, raised above 1e9 when the shoulder is large
/// enough that 1e9 would not be six decades above it.
pub fn blocking_value(r_shoulder_ohm: f64) -> f64 {
    DEFAULT_R_OPEN_OHM.max(1e6 * r_shoulder_ohm)
}

impl RfProfile {
    /// Build-up of the form `r_sh + (r_start - r_sh) (1 - s)^order`.
    pub fn power_law(r_start_ohm: f64, r_shoulder_ohm: f64, buildup_duration_s: f64, order: u32) -> Result<Self> {
        let span = r_start_ohm - r_shoulder_ohm;
        // binomial expansion of (1 - s)^order
        let mut coeffs = vec![0.0; order as usize + 1];
        let mut binom = 1.0;
        for k in 0..=order as usize {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            coeffs[k] = span * sign * binom;
            binom = binom * (order as f64 - k as f64) / (k as f64 + 1.0);
        }
        coeffs[0] += r_shoulder_ohm;
        let p = Self {
            r_start_ohm,
            r_shoulder_ohm,
            buildup_duration_s,
            poly_coeffs: coeffs,
            intermittency: None,
            r_open_ohm: blocking_value(r_shoulder_ohm),
        };
        p.validate()?;
        Ok(p)
    }

    /// Least-squares polynomial through `(s, ohms)` control points with
    /// `s` in `[0, 1]`.
    pub fn from_control_points(
        points: &[(f64, f64)],
        degree: usize,
        buildup_duration_s: f64,
    ) -> Result<Self> {
        if degree > MAX_POLY_DEGREE {
            return Err(Error::InvalidScenario(format!(
                "polynomial degree {degree} exceeds {MAX_POLY_DEGREE}"
            )));
        }
        if points.len() < degree + 1 {
            return Err(Error::InvalidScenario(format!(
                "{} control points cannot fix a degree-{degree} polynomial",
                points.len()
            )));
        }
        if points.iter().any(|&(s, _)| !(0.0..=1.0).contains(&s)) {
            return Err(Error::InvalidScenario("control point time outside [0, 1]".into()));
        }
        let vander = DMatrix::from_fn(points.len(), degree + 1, |i, k| points[i].0.powi(k as i32));
        let rhs = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
        let coeffs = vander
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::InvalidScenario(format!("control point fit failed: {e}")))?;
        let coeffs: Vec<f64> = coeffs.iter().copied().collect();
        let eval = |s: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c);
        let p = Self {
            r_start_ohm: eval(0.0),
            r_shoulder_ohm: eval(1.0),
            buildup_duration_s,
            poly_coeffs: coeffs.clone(),
            intermittency: None,
            r_open_ohm: 0.0,
        };
        let p = Self {
            r_open_ohm: blocking_value(p.r_shoulder_ohm),
            ..p
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_intermittency(mut self, t_on_s: f64, t_off_s: f64) -> Self {
        self.intermittency = Some(IntermittencyWindow { t_on_s, t_off_s });
        self
    }

    fn poly(&self, s: f64) -> f64 {
        self.poly_coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    /// Checks bounds, monotone build-up and the blocking value on a dense grid.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if !(self.r_shoulder_ohm > 0.0 && self.r_start_ohm >= self.r_shoulder_ohm) {
            return bad(format!(
                "need 0 < r_shoulder <= r_start, got {} and {}",
                self.r_shoulder_ohm, self.r_start_ohm
            ));
        }
        if !(self.buildup_duration_s > 0.0) {
            return bad("buildup_duration_s must be positive".into());
        }
        if self.poly_coeffs.is_empty() || self.poly_coeffs.len() > MAX_POLY_DEGREE + 1 {
            return bad(format!("need 1..={} polynomial coefficients", MAX_POLY_DEGREE + 1));
        }
        if self.r_open_ohm < 1e6 * self.r_shoulder_ohm {
            return bad("r_open_ohm must be at least 1e6 * r_shoulder_ohm".into());
        }
        if let Some(w) = self.intermittency {
            if !(w.t_on_s >= 0.0 && w.t_off_s > w.t_on_s) {
                return bad("intermittency window must satisfy 0 <= t_on < t_off".into());
            }
        }
        let tol = 1e-9 * self.r_start_ohm;
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let r = self.poly(k as f64 / 1000.0);
            if r > self.r_start_ohm + tol || r < self.r_shoulder_ohm - tol {
                return bad(format!("build-up polynomial leaves [r_shoulder, r_start] at s = {}", k as f64 / 1000.0));
            }
            if r > prev + tol {
                return bad("build-up polynomial is not non-increasing".into());
            }
            prev = r;
        }
        Ok(())
    }

    /// Fault resistance `t` seconds after inception.
    pub fn rf_at(&self, t: f64) -> f64 {
        if self.intermittency.is_some_and(|w| w.contains(t)) {
            return self.r_open_ohm;
        }
        if t < self.buildup_duration_s {
            let s = (t / self.buildup_duration_s).max(0.0);
            self.poly(s).clamp(self.r_shoulder_ohm, self.r_start_ohm)
        } else {
            self.r_shoulder_ohm
        }
    }
}

/// Breakdown voltages (volts) of the positive and negative conduction paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiodePair {
    pub v_p: f64,
    pub v_n: f64,
}

impl DiodePair {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_p >= 0.0 && self.v_n >= 0.0) {
            return Err(Error::InvalidScenario("diode voltages must be non-negative".into()));
        }
        Ok(())
    }

    /// Full scenario invariant: both positive and unequal.
    pub fn validate_asymmetric(&self) -> Result<()> {
        if !(self.v_p > 0.0 && self.v_n > 0.0) || self.v_p == self.v_n {
            return Err(Error::InvalidScenario(format!(
                "diode sources must be positive and unequal, got v_p = {}, v_n = {}",
                self.v_p, self.v_n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HifScenario {
    pub bus: BusId,
    pub phase: Phase,
    pub t_start_s: f64,
    pub duration_s: f64,
    pub rf: RfProfile,
    pub diodes: DiodePair,
}

impl HifScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidScenario("duration_s must be positive".into()));
        }
        if !(self.t_start_s >= 0.0) {
            return Err(Error::InvalidScenario("t_start_s must be non-negative".into()));
        }
        self.rf.validate()?;
        self.diodes.validate_asymmetric()
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.t_start_s && t < self.t_start_s + self.duration_s
    }

    /// Lateral fault with the default build-up: 20 kΩ down to
    /// `r_shoulder_ohm` over 0.5 s, diode sources of 2.0 kV and 2.6 kV,
    /// starting at 0.5 s and lasting 1.0 s.
    pub fn lateral(bus: BusId, phase: Phase, r_shoulder_ohm: f64) -> Self {
        Self {
            bus,
            phase,
            t_start_s: 0.5,
            duration_s: 1.0,
            rf: RfProfile::power_law(20e3, r_shoulder_ohm, 0.5, 4).expect("valid default profile"),
            diodes: DiodePair { v_p: 2000.0, v_n: 2600.0 },
        }
    }
}

/// Fault current per sample for a given resistance.
pub fn hif_current_waveform(v_samples: &[f64], r_f: f64, diodes: &DiodePair) -> Vec<f64> {
    v_samples
        .iter()
        .map(|&v| {
            if v > diodes.v_p {
                (v - diodes.v_p) / r_f
            } else if v < -diodes.v_n {
                (v + diodes.v_n) / r_f
            } else {
                0.0
            }
        })
        .collect()
}

/// RMS phasor of the `f0` component of exactly one cycle of samples taken
/// at `sample_rate_hz`.
pub fn fundamental_phasor(samples: &[f64], sample_rate_hz: f64, f0: f64) -> Result<Complex64> {
    let per_cycle = sample_rate_hz / f0;
    let n = samples.len();
    if (per_cycle - n as f64).abs() > 1e-9 * per_cycle {
        return Err(Error::Sampling(format!(
            "{n} samples do not span one {f0} Hz cycle at {sample_rate_hz} Hz"
        )));
    }
    if n < MIN_SAMPLES_PER_CYCLE {
        return Err(Error::Sampling(format!(
            "need at least {MIN_SAMPLES_PER_CYCLE} samples per cycle, got {n}"
        )));
    }
    let w = 2.0 * PI / n as f64;
    let acc = samples
        .iter()
        .enumerate()
        .fold(Complex64::new(0.0, 0.0), |acc, (k, &x)| {
            acc + Complex64::from_polar(x, -w * k as f64)
        });
    Ok(acc * (SQRT_2 / n as f64))
}

/// One cycle of `sqrt(2) |V| cos(wt + angle)`.
pub fn cycle_samples(phasor: Complex64, samples_per_cycle: usize) -> Vec<f64> {
    let w = 2.0 * PI / samples_per_cycle as f64;
    let (mag, ang) = (phasor.norm() * SQRT_2, phasor.arg());
    (0..samples_per_cycle)
        .map(|k| mag * (w * k as f64 + ang).cos())
        .collect()
}

/// Fundamental fault current phasor (A) for a bus voltage phasor (V) and
/// fault resistance.
pub fn fault_current_phasor(v_bus: Complex64, r_f: f64, diodes: &DiodePair, samples_per_cycle: usize) -> Complex64 {
    let v = cycle_samples(v_bus, samples_per_cycle);
    let i = hif_current_waveform(&v, r_f, diodes);
    let rate = samples_per_cycle as f64 * DEFAULT_F0_HZ;
    fundamental_phasor(&i, rate, DEFAULT_F0_HZ).expect("sample count matches by construction")
}

/// Complex power (W, var) drawn by the fault at absolute time `t`, given
/// the bus voltage phasor in volts. Zero outside the fault interval.
pub fn hif_equivalent_injection(v_bus: Complex64, scenario: &HifScenario, t: f64) -> Complex64 {
    hif_equivalent_injection_sampled(v_bus, scenario, t, DEFAULT_SAMPLES_PER_CYCLE)
}

pub fn hif_equivalent_injection_sampled(
    v_bus: Complex64,
    scenario: &HifScenario,
    t: f64,
    samples_per_cycle: usize,
) -> Complex64 {
    if !scenario.is_active(t) || v_bus.norm() == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let r_f = scenario.rf.rf_at(t - scenario.t_start_s);
    let i = fault_current_phasor(v_bus, r_f, &scenario.diodes, samples_per_cycle);
    v_bus * i.conj()
}
