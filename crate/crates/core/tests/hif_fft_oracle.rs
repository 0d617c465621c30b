use hifdet::hif::{cycle_samples, fault_current_phasor, fundamental_phasor, hif_current_waveform, DiodePair, DEFAULT_F0_HZ};
use num_complex::Complex64;
use rustfft::FftPlanner;

fn fft_bin1_rms(samples: &[f64]) -> Complex64 {
    let mut buf: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[1] * (2f64.sqrt() / samples.len() as f64)
}

#[test]
fn fundamental_phasor_matches_fft() {
    let diodes = DiodePair { v_p: 2000.0, v_n: 2600.0 };
    for n in [64, 128, 256] {
        for (mag, ang) in [(7300.0, 0.0), (6900.0, -0.4), (7100.0, 2.1)] {
            let v = cycle_samples(Complex64::from_polar(mag, ang), n);
            let i = hif_current_waveform(&v, 750.0, &diodes);
            let ours = fundamental_phasor(&i, n as f64 * DEFAULT_F0_HZ, DEFAULT_F0_HZ).unwrap();
            let oracle = fft_bin1_rms(&i);
            assert!((ours - oracle).norm() < 1e-9 * oracle.norm(), "n {n}: {ours} vs {oracle}");
            let direct = fault_current_phasor(Complex64::from_polar(mag, ang), 750.0, &diodes, n);
            assert!((direct - oracle).norm() < 1e-9 * oracle.norm());
        }
    }
}

#[test]
fn asymmetric_sources_give_even_harmonics() {
    let diodes = DiodePair { v_p: 2000.0, v_n: 2600.0 };
    let v = cycle_samples(Complex64::new(7300.0, 0.0), 128);
    let i = hif_current_waveform(&v, 750.0, &diodes);
    let mut buf: Vec<Complex64> = i.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(128).process(&mut buf);
    assert!(buf[0].norm() > 1e-3, "dc component expected");
    assert!(buf[2].norm() > 1e-3, "second harmonic expected");
}

#[test]
fn fault_current_is_in_phase_with_voltage() {
    let diodes = DiodePair { v_p: 2000.0, v_n: 2600.0 };
    // exact when the samples are symmetric about the voltage peak
    let i = fault_current_phasor(Complex64::new(7300.0, 0.0), 900.0, &diodes, 128);
    assert!(i.arg().abs() < 1e-12);
    assert!(i.norm() < 7300.0 / 900.0);
    // otherwise the conduction edges fall between samples
    let i = fault_current_phasor(Complex64::from_polar(7300.0, 0.7), 900.0, &diodes, 128);
    assert!((i.arg() - 0.7).abs() < 2.0 * std::f64::consts::PI / 128.0, "{}", i.arg());
}
