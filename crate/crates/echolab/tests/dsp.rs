use std::f64::consts::PI;

use echolab::dsp::{
    bode_measure, bode_resonance, chirp_frequency, chirp_measure, cw_response, estimate_peak,
    estimate_spectrum_peak, fft_complex, gen_chirp, gen_sine_burst, lockin_demod, pll_sweep,
    pll_track, spectrum, DspError, MeasureSettings, PllGains, PllState, Window,
};
use echolab::experiments::{ac_point, AcQuantity, ChannelConfig, ExperimentError};
use echolab::Trace;
use proptest::prelude::*;

fn tone(f: f64, fs: f64, n: usize, amp: f64, phi: f64) -> Trace {
    let s = (0..n)
        .map(|k| amp * (2.0 * PI * f * k as f64 / fs + phi).sin())
        .collect();
    Trace::new("tone", s, fs)
}

fn parseval_gap(trace: &Trace) -> f64 {
    let bins = fft_complex(&trace.samples, Window::Rectangular, trace.len());
    let time: f64 = trace.samples.iter().map(|v| v * v).sum();
    let freq: f64 = bins.iter().map(|b| b.norm_sqr()).sum::<f64>() / bins.len() as f64;
    (time - freq).abs() / time
}

proptest! {
    #[test]
    fn lockin_amplitude_ignores_phase(
        amp in 0.01f64..10.0,
        phi in -PI..PI,
        per_cycle in 20usize..400,
    ) {
        let fs = 1e6;
        let f = fs / per_cycle as f64;
        let r = lockin_demod(&tone(f, fs, per_cycle * 30, amp, phi), f, 2.0).unwrap();
        prop_assert!((r.amplitude - amp).abs() <= 1e-6 * amp);
        let dphi = (r.phase.unwrap() - phi + PI).rem_euclid(2.0 * PI) - PI;
        prop_assert!(dphi.abs() < 1e-6);
    }

    #[test]
    fn generators_satisfy_parseval(
        f in 1e3f64..30e3,
        cycles in 1u32..20,
        span in 1.1f64..3.0,
        amp in 0.1f64..5.0,
    ) {
        let fs = 1e6;
        let burst = gen_sine_burst(f, cycles, fs, amp, 2e-3).unwrap();
        prop_assert!(parseval_gap(&burst) < 1e-9);
        let chirp = gen_chirp(f, f * span, 1e-3, fs, amp).unwrap();
        prop_assert!(parseval_gap(&chirp) < 1e-9);
    }
}

#[test]
fn burst_spectrum_peaks_within_a_bin() {
    let (f, fs) = (40e3, 1e6);
    let b = gen_sine_burst(f, 40, fs, 1.0, 2e-3).unwrap();
    let s = spectrum(&b, Window::Hann, 8192, false);
    let p = estimate_spectrum_peak(&s, (30e3, 50e3)).unwrap();
    assert!((p.f_peak - f).abs() < s.bin_width(), "{} vs {f}", p.f_peak);
}

#[test]
fn chirp_ridge_rises_through_the_midpoint() {
    let (f0, f1, dur, fs) = (20e3, 60e3, 4e-3, 2e6);
    assert_eq!(chirp_frequency(f0, f1, dur, dur / 2.0), 40e3);
    let c = gen_chirp(f0, f1, dur, fs, 1.0).unwrap();
    let seg = 1024;
    let mut ridge = Vec::new();
    for start in (0..c.len() - seg).step_by(seg) {
        let part = Trace::new("seg", c.samples[start..start + seg].to_vec(), fs);
        let s = spectrum(&part, Window::Hann, 8 * seg, false);
        let p = estimate_spectrum_peak(&s, (10e3, 70e3)).unwrap();
        let mid = (start + seg / 2) as f64 / fs;
        // a segment sweeps about 20 kHz/ms * 0.5 ms, so allow a few kHz
        assert!((p.f_peak - chirp_frequency(f0, f1, dur, mid)).abs() < 3e3);
        ridge.push(p.f_peak);
    }
    assert!(ridge.windows(2).all(|w| w[1] > w[0]), "{ridge:?}");
}

#[test]
fn band_selects_the_weaker_tone() {
    let fs = 1e6;
    let n = 8192;
    let samples: Vec<f64> = tone(30e3, fs, n, 5.0, 0.0)
        .samples
        .iter()
        .zip(&tone(42e3, fs, n, 0.5, 0.3).samples)
        .map(|(a, b)| a + b)
        .collect();
    let s = spectrum(&Trace::new("two", samples, fs), Window::Hann, n, false);
    let strong = estimate_spectrum_peak(&s, (20e3, 60e3)).unwrap();
    let weak = estimate_spectrum_peak(&s, (38e3, 46e3)).unwrap();
    assert!((strong.f_peak - 30e3).abs() < 50.0);
    assert!((weak.f_peak - 42e3).abs() < 50.0);
    assert!((weak.mag - 0.5).abs() < 0.05);
}

#[test]
fn lockin_rejects_the_second_harmonic() {
    let (f, fs, n) = (1e3, 1e6, 40_000);
    let samples: Vec<f64> = tone(f, fs, n, 1.0, 0.7)
        .samples
        .iter()
        .zip(&tone(2.0 * f, fs, n, 3.0, -1.1).samples)
        .map(|(a, b)| a + b)
        .collect();
    let r = lockin_demod(&Trace::new("h", samples, fs), f, 1.0).unwrap();
    assert!((r.amplitude - 1.0).abs() < 1e-9);
    assert!((r.phase.unwrap() - 0.7).abs() < 1e-9);
}

#[test]
fn flat_response_has_no_peak() {
    let freqs: Vec<f64> = (0..100).map(|k| k as f64).collect();
    let mags: Vec<f64> = freqs.iter().map(|f| 1.0 + f).collect();
    assert!(matches!(
        estimate_peak(&freqs, &mags, (10.0, 90.0)),
        Err(DspError::NoPeak { .. })
    ));
}

#[test]
fn chirp_span_away_from_resonance_finds_nothing() {
    let cfg = ChannelConfig::table_i_stated();
    let f = cfg.nominal_fp();
    let s = MeasureSettings::default();
    let err = chirp_measure(&cfg, 0.5 * f, 0.6 * f, 2e-4, &s).unwrap_err();
    assert!(matches!(err, ExperimentError::Dsp(DspError::NoPeak { .. })));
}

#[test]
fn lockin_response_matches_the_ac_solution() {
    let cfg = ChannelConfig::table_i_stated().with_load(1e-9);
    let s = MeasureSettings::default();
    let f0 = cfg.nominal_fp();
    for f in [0.97 * f0, f0, 1.01 * f0] {
        let measured = cw_response(&cfg, f, &s).unwrap();
        let exact = ac_point(&cfg, AcQuantity::Transfer, f).unwrap();
        assert!(
            (measured - exact).norm() < 0.02 * exact.norm(),
            "{f}: {measured} vs {exact}"
        );
    }
}

#[test]
fn single_point_grid() {
    let cfg = ChannelConfig::table_i_stated();
    let f = cfg.nominal_fp();
    let r = bode_measure(&cfg, &[f], &MeasureSettings::default()).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r.freqs, [f]);
}

#[test]
fn pll_holds_still_without_load() {
    let cfg = ChannelConfig::table_i_stated();
    let s = MeasureSettings::default();
    let f = cfg.nominal_fp();
    let setpoint = cw_response(&cfg, f, &s).unwrap().arg();
    let delta = 0.02;
    let slope = (cw_response(&cfg, f + delta, &s).unwrap().arg()
        - cw_response(&cfg, f - delta, &s).unwrap().arg())
        / (2.0 * delta);
    let state = PllState::new(
        f,
        setpoint,
        PllGains::from_slope(slope).unwrap(),
        slope,
        s.pll_band.resolve(f),
    );
    let out = pll_track(&cfg, state, &[0.0; 8], &s).unwrap();
    assert_eq!(out.log.len(), 8);
    for e in &out.log {
        assert!(e.phase_error.abs() < 0.01, "{e:?}");
        assert!((e.frequency - f).abs() < 0.01);
    }
}

#[test]
fn pll_follows_a_small_load_step() {
    let cfg = ChannelConfig::table_i_stated();
    let s = MeasureSettings::default();
    let loaded = cfg.clone().with_load(0.25e-9);
    let bode = bode_resonance(&loaded, cfg.nominal_fp(), &s).unwrap().f_p;
    let pll = pll_sweep(&cfg, &[0.0, 0.25e-9], &s);
    let tracked = pll[1].as_ref().unwrap().f_p;
    assert!((tracked - bode).abs() < 0.01 * bode, "{tracked} vs {bode}");
}
