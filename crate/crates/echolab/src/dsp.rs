//! Signal generators, spectral estimation and the four resonance
//! measurements run against the simulated channel.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::circuit::Waveform;
use crate::experiments::{
    build_channel, channel_dt, linspace, nodes, refine_extremum, run_backscatter, Backscatter,
    ChannelConfig, ExperimentError, Method, ResonanceEstimate,
};
use crate::transient::{Session, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DspError {
    #[error("sample rate {fs} Hz is below 10x the highest frequency {f} Hz")]
    NyquistViolation { fs: f64, f: f64 },
    #[error("no peak in band [{lo}, {hi}] Hz")]
    NoPeak { lo: f64, hi: f64 },
    #[error("trace too short: need {needed} samples, have {have}")]
    TooShort { needed: usize, have: usize },
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error(
        "PLL lost lock at iteration {iteration} (frequency {frequency} Hz pinned at band edge)"
    )]
    LossOfLock { iteration: usize, frequency: f64 },
}

/// Ordered `(frequency, complex value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyResponse {
    pub freqs: Vec<f64>,
    pub values: Vec<Complex64>,
    /// False for responses without meaningful phase (chirp spectra).
    pub has_phase: bool,
}

impl FrequencyResponse {
    pub fn new(freqs: Vec<f64>, values: Vec<Complex64>) -> Self {
        Self {
            freqs,
            values,
            has_phase: true,
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    /// Phases unwrapped along the grid.
    pub fn phases(&self) -> Vec<f64> {
        unwrap(&self.values.iter().map(|v| v.arg()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// CSV with header `f_hz,mag,phase_rad`; the phase column is empty when
    /// the response carries no phase.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "f_hz,mag,phase_rad")?;
        let phases = self.phases();
        for (k, (f, v)) in self.freqs.iter().zip(&self.values).enumerate() {
            if self.has_phase {
                writeln!(out, "{f},{},{}", v.norm(), phases[k])?;
            } else {
                writeln!(out, "{f},{},", v.norm())?;
            }
        }
        Ok(())
    }
}

/// Removes `2 pi` jumps between consecutive samples.
pub fn unwrap(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (k, &p) in phases.iter().enumerate() {
        if k > 0 {
            let prev = phases[k - 1];
            let d = p - prev;
            if d > PI {
                offset -= 2.0 * PI;
            } else if d < -PI {
                offset += 2.0 * PI;
            }
        }
        out.push(p + offset);
    }
    out
}

fn check_rate(fs: f64, f: f64) -> Result<(), DspError> {
    if !(fs.is_finite() && f.is_finite() && f > 0.0) {
        return Err(DspError::BadArgument(format!("fs = {fs}, f = {f}")));
    }
    if fs <= 10.0 * f {
        return Err(DspError::NyquistViolation { fs, f });
    }
    Ok(())
}

/// `cycles` periods of `amp sin(2 pi f t)` starting at zero phase, then
/// silence up to `duration` seconds in total.
pub fn gen_sine_burst(
    f: f64,
    cycles: u32,
    fs: f64,
    amp: f64,
    duration: f64,
) -> Result<Trace, DspError> {
    check_rate(fs, f)?;
    let n = (duration * fs).round() as usize;
    let active = f64::from(cycles) / f;
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 / fs;
            if t < active {
                amp * (2.0 * PI * f * t).sin()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Trace::new("burst", samples, fs))
}

/// Linear chirp from `f0` to `f1` over `duration`, continuous phase.
pub fn gen_chirp(f0: f64, f1: f64, duration: f64, fs: f64, amp: f64) -> Result<Trace, DspError> {
    check_rate(fs, f0.max(f1))?;
    if f0.min(f1) <= 0.0 {
        return Err(DspError::BadArgument(
            "chirp frequencies must be positive".into(),
        ));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(DspError::BadArgument(
            "chirp duration must be positive".into(),
        ));
    }
    let n = (duration * fs).round() as usize;
    let rate = (f1 - f0) / duration;
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 / fs;
            amp * (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        })
        .collect();
    Ok(Trace::new("chirp", samples, fs))
}

/// Instantaneous frequency of [`gen_chirp`] at time `t`.
pub fn chirp_frequency(f0: f64, f1: f64, duration: f64, t: f64) -> f64 {
    f0 + (f1 - f0) * t / duration
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    Hann,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|k| {
                    if n <= 1 {
                        1.0
                    } else {
                        0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos()
                    }
                })
                .collect(),
        }
    }
}

/// One-sided amplitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub phase: Option<Vec<f64>>,
    pub window: Window,
    pub source_len: usize,
    pub fft_len: usize,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        self.freqs.get(1).copied().unwrap_or(0.0) - self.freqs[0]
    }

    pub fn as_response(&self) -> FrequencyResponse {
        let values = match &self.phase {
            Some(ph) => self
                .magnitude
                .iter()
                .zip(ph)
                .map(|(&m, &p)| Complex64::from_polar(m, p))
                .collect(),
            None => self
                .magnitude
                .iter()
                .map(|&m| Complex64::new(m, 0.0))
                .collect(),
        };
        FrequencyResponse {
            freqs: self.freqs.clone(),
            values,
            has_phase: self.phase.is_some(),
        }
    }
}

/// Full complex DFT of the windowed, zero-padded signal.
pub fn fft_complex(samples: &[f64], window: Window, fft_len: usize) -> Vec<Complex64> {
    let n = fft_len.max(samples.len());
    let w = window.coefficients(samples.len());
    let mut buf: Vec<Complex64> = samples
        .iter()
        .zip(&w)
        .map(|(x, w)| Complex64::new(x * w, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf
}

/// Windowed, zero-padded FFT of `trace`, magnitude scaled so that a
/// rectangular-windowed sine of amplitude `A` peaks near `A`.
pub fn spectrum(trace: &Trace, window: Window, fft_len: usize, with_phase: bool) -> Spectrum {
    let bins = fft_complex(&trace.samples, window, fft_len);
    let n = bins.len();
    let gain: f64 = window
        .coefficients(trace.len())
        .iter()
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let half = n / 2 + 1;
    let freqs = (0..half)
        .map(|k| k as f64 * trace.sample_rate / n as f64)
        .collect();
    let magnitude = bins[..half].iter().map(|b| 2.0 * b.norm() / gain).collect();
    let phase = with_phase.then(|| bins[..half].iter().map(|b| b.arg()).collect());
    Spectrum {
        freqs,
        magnitude,
        phase,
        window,
        source_len: trace.len(),
        fft_len: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub f_peak: f64,
    pub mag: f64,
    /// Set when the maximum sits on the band edge.
    pub at_edge: bool,
}

/// Largest in-band bin refined by a parabola through the log-magnitudes of
/// it and its two neighbours.
pub fn estimate_peak(freqs: &[f64], mags: &[f64], band: (f64, f64)) -> Result<Peak, DspError> {
    let no_peak = DspError::NoPeak {
        lo: band.0,
        hi: band.1,
    };
    let lo = freqs.partition_point(|&f| f < band.0);
    let hi = freqs.partition_point(|&f| f <= band.1);
    if hi < lo + 3 {
        return Err(no_peak);
    }
    let k = (lo..hi)
        .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
        .ok_or(no_peak.clone())?;
    let peak_mag = mags[k];
    if !(peak_mag > 0.0) {
        return Err(no_peak);
    }
    if k == lo || k + 1 == hi {
        return Err(no_peak);
    }
    if mags[k] <= mags[k - 1] && mags[k] <= mags[k + 1] {
        return Err(no_peak);
    }
    let logs = [
        mags[k - 1].max(1e-300).ln(),
        mags[k].ln(),
        mags[k + 1].max(1e-300).ln(),
    ];
    let (p, log_peak) = crate::experiments::parabolic(&logs, 1);
    let step = if p >= 0.0 {
        freqs[k + 1] - freqs[k]
    } else {
        freqs[k] - freqs[k - 1]
    };
    Ok(Peak {
        f_peak: freqs[k] + p * step,
        mag: log_peak.exp(),
        at_edge: false,
    })
}

pub fn estimate_spectrum_peak(spec: &Spectrum, band: (f64, f64)) -> Result<Peak, DspError> {
    estimate_peak(&spec.freqs, &spec.magnitude, band)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockIn {
    pub amplitude: f64,
    /// `None` when the amplitude is zero.
    pub phase: Option<f64>,
}

/// Synchronous demodulation of `trace` against `sin(2 pi f_ref t)`.
///
/// The first `settle` reference cycles are discarded and the products are
/// averaged over the largest whole number of cycles that remains. For an
/// input `A sin(2 pi f t + phi)` this returns `(A, phi)`.
pub fn lockin_demod(trace: &Trace, f_ref: f64, settle: f64) -> Result<LockIn, DspError> {
    lockin_window(trace, f_ref, settle, None)
}

/// As [`lockin_demod`], integrating at most `cycles` reference periods.
pub fn lockin_window(
    trace: &Trace,
    f_ref: f64,
    settle: f64,
    cycles: Option<usize>,
) -> Result<LockIn, DspError> {
    if !(f_ref > 0.0 && f_ref.is_finite()) {
        return Err(DspError::BadArgument(format!(
            "reference frequency {f_ref}"
        )));
    }
    let fs = trace.sample_rate;
    let per_cycle = fs / f_ref;
    let start = (settle * per_cycle).round() as usize;
    let available = trace.len().saturating_sub(start) as f64 / per_cycle;
    let mut whole = available.floor() as usize;
    if let Some(c) = cycles {
        whole = whole.min(c);
    }
    if whole == 0 {
        return Err(DspError::TooShort {
            needed: start + per_cycle.ceil() as usize,
            have: trace.len(),
        });
    }
    let count = (whole as f64 * per_cycle).round() as usize;
    let (mut i_acc, mut q_acc) = (0.0, 0.0);
    for k in start..start + count {
        let t = trace.time(k);
        let (s, c) = (2.0 * PI * f_ref * t).sin_cos();
        i_acc += trace.samples[k] * s;
        q_acc += trace.samples[k] * c;
    }
    let i = 2.0 * i_acc / count as f64;
    let q = 2.0 * q_acc / count as f64;
    let amplitude = i.hypot(q);
    let phase = (amplitude > 0.0).then(|| {
        let p = q.atan2(i);
        if p <= -PI {
            PI
        } else {
            p
        }
    });
    Ok(LockIn { amplitude, phase })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, fs: f64, n: usize, amp: f64, phi: f64) -> Trace {
        let s = (0..n)
            .map(|k| amp * (2.0 * PI * f * k as f64 / fs + phi).sin())
            .collect();
        Trace::new("tone", s, fs)
    }

    #[test]
    fn burst_sample_count() {
        let b = gen_sine_burst(40e3, 10, 10e6, 1.0, 1e-3).unwrap();
        let nonzero = b.samples.iter().filter(|v| **v != 0.0).count();
        // sin(0) is an exact zero; the half-cycle points are not
        assert_eq!(nonzero, 2499);
        assert_eq!(b.samples.len(), 10_000);
        let active = (0..b.len()).filter(|&k| b.time(k) < 10.0 / 40e3).count();
        assert_eq!(active, 2500);
        let z = gen_sine_burst(40e3, 10, 10e6, 0.0, 1e-3).unwrap();
        assert!(z.samples.iter().all(|v| *v == 0.0));
        assert!(matches!(
            gen_sine_burst(40e3, 10, 300e3, 1.0, 1e-3),
            Err(DspError::NyquistViolation { .. })
        ));
    }

    #[test]
    fn known_tone_peak() {
        let t = tone(40e3, 1e6, 4096, 1.0, 0.0);
        let s = spectrum(&t, Window::Hann, 4096, false);
        let p = estimate_spectrum_peak(&s, (30e3, 50e3)).unwrap();
        assert!((p.f_peak - 40e3).abs() < 25.0);
    }

    #[test]
    fn zero_spectrum_has_no_peak() {
        let t = Trace::new("z", vec![0.0; 1024], 1e6);
        let s = spectrum(&t, Window::Hann, 1024, false);
        assert!(estimate_spectrum_peak(&s, (1e3, 4e5)).is_err());
    }

    #[test]
    fn lockin_recovers_amplitude_and_phase() {
        let t = tone(1e3, 1e6, 50_000, 0.7, 0.4);
        let r = lockin_demod(&t, 1e3, 5.0).unwrap();
        assert!((r.amplitude - 0.7).abs() < 1e-3 * 0.7);
        assert!((r.phase.unwrap() - 0.4).abs() < 1e-3);
        let z = Trace::new("z", vec![0.0; 10_000], 1e6);
        let r = lockin_demod(&z, 1e3, 1.0).unwrap();
        assert_eq!(r.amplitude, 0.0);
        assert!(r.phase.is_none());
        let short = Trace::new("s", vec![0.0; 100], 1e6);
        assert!(matches!(
            lockin_demod(&short, 1e3, 0.0),
            Err(DspError::TooShort { .. })
        ));
    }

    #[test]
    fn unwrap_removes_jumps() {
        let p = unwrap(&[3.0, -3.0, -2.5]);
        assert!((p[1] - (2.0 * PI - 3.0)).abs() < 1e-12);
    }
}

/// Rear termination of the interrogator during pulse-echo captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    /// Whatever the channel configuration says.
    Configured,
    /// The interrogator's own characteristic impedance. The transmitter then
    /// stops ringing within a few microseconds and the echo tail carries the
    /// USN resonance alone.
    Matched,
}

/// Frequency span given relative to the nominal resonance or in hertz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Span {
    Relative(f64, f64),
    Absolute(f64, f64),
}

impl Span {
    pub fn resolve(self, nominal: f64) -> (f64, f64) {
        match self {
            Span::Relative(a, b) => (a * nominal, b * nominal),
            Span::Absolute(a, b) => (a, b),
        }
    }
}

/// Knobs shared by the measurement methods.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSettings {
    /// Simulation step; `None` picks [`channel_dt`].
    pub dt: Option<f64>,
    /// Drive amplitude, volts.
    pub amplitude: f64,
    /// Final grid spacing of the AC reference search, hertz.
    pub ac_tolerance: f64,
    /// Band searched for the spectral peak.
    pub band: Span,
    pub burst_cycles: u32,
    pub pulse_backing: Backing,
    /// Gap between the end of the excitation and the analysed echo tail.
    pub echo_settle: f64,
    /// Length of the analysed echo tail.
    pub echo_record: f64,
    /// FFT length is the next power of two above `oversample` times the tail.
    pub fft_oversample: usize,
    pub chirp_span: Span,
    pub chirp_duration: f64,
    /// Bode search extends this far below and above the expected `f_p`, hertz.
    pub bode_search: (f64, f64),
    /// Coarse bode grid spacing, hertz.
    pub bode_step: f64,
    /// Final bode grid spacing, hertz.
    pub bode_tolerance: f64,
    /// Lock-in: discarded and integrated drive cycles per frequency point.
    pub lockin_settle: f64,
    pub lockin_cycles: usize,
    /// PLL iterations spent at each load.
    pub pll_iterations: usize,
    /// PLL frequency band.
    pub pll_band: Span,
    /// Consecutive iterations at a band edge before lock is declared lost.
    pub pll_pin_limit: usize,
}

impl Default for MeasureSettings {
    fn default() -> Self {
        Self {
            dt: None,
            amplitude: 1.0,
            ac_tolerance: 0.01,
            band: Span::Relative(0.99, 1.01),
            burst_cycles: 10,
            pulse_backing: Backing::Matched,
            echo_settle: 2e-3,
            echo_record: 12e-3,
            fft_oversample: 4,
            chirp_span: Span::Relative(0.9, 1.1),
            chirp_duration: 1e-3,
            bode_search: (30.0, 3.0),
            bode_step: 0.2,
            bode_tolerance: 0.005,
            lockin_settle: 1.0,
            lockin_cycles: 20,
            pll_iterations: 30,
            pll_band: Span::Relative(0.99, 1.01),
            pll_pin_limit: 5,
        }
    }
}

impl MeasureSettings {
    /// Absolute spans of the bench-top airborne setup (35-45 kHz chirp around
    /// a 40 kHz transducer). Only meaningful for presets resonating there.
    pub fn airborne40k() -> Self {
        Self {
            chirp_span: Span::Absolute(35e3, 45e3),
            band: Span::Absolute(35e3, 45e3),
            ..Self::default()
        }
    }

    pub fn dt_for(&self, cfg: &ChannelConfig) -> f64 {
        self.dt.unwrap_or_else(|| channel_dt(cfg))
    }

    /// The channel as seen by the pulse-echo methods.
    pub fn pulse_channel(&self, cfg: &ChannelConfig) -> ChannelConfig {
        let mut c = cfg.clone();
        if self.pulse_backing == Backing::Matched {
            c.z_back_ext = c.interrogator.zc;
        }
        c
    }
}

/// Hann-windowed spectrum of the echo tail of `bs`, starting `settle`
/// seconds after the excitation ends.
fn tail_spectrum(
    bs: &Backscatter,
    excitation_end: f64,
    s: &MeasureSettings,
) -> Result<Spectrum, DspError> {
    let tail = bs.received.slice_from(excitation_end + s.echo_settle);
    if tail.len() < 8 {
        return Err(DspError::TooShort {
            needed: 8,
            have: tail.len(),
        });
    }
    let n = (tail.len() * s.fft_oversample.max(1)).next_power_of_two();
    Ok(spectrum(&tail, Window::Hann, n, false))
}

fn peak_estimate(
    spec: &Spectrum,
    band: (f64, f64),
    method: Method,
) -> Result<ResonanceEstimate, ExperimentError> {
    let p = estimate_spectrum_peak(spec, band)?;
    if p.at_edge {
        return Err(DspError::NoPeak {
            lo: band.0,
            hi: band.1,
        }
        .into());
    }
    Ok(ResonanceEstimate {
        f_s: None,
        f_p: p.f_peak,
        method,
        band,
    })
}

/// Burst excitation at `drive`, spectral peak of the ringing echo tail.
pub fn ringdown_measure(
    cfg: &ChannelConfig,
    drive: f64,
    s: &MeasureSettings,
) -> Result<ResonanceEstimate, ExperimentError> {
    ringdown_spectrum(cfg, drive, s).map(|(_, e)| e)
}

/// As [`ringdown_measure`], also returning the tail magnitude spectrum.
pub fn ringdown_spectrum(
    cfg: &ChannelConfig,
    drive: f64,
    s: &MeasureSettings,
) -> Result<(Spectrum, ResonanceEstimate), ExperimentError> {
    let channel = s.pulse_channel(cfg);
    let burst = Waveform::SineBurst {
        amplitude: s.amplitude,
        frequency: drive,
        cycles: Some(s.burst_cycles),
        start: 0.0,
    };
    let end = burst.active_until().expect("finite burst");
    let bs = run_backscatter(
        &channel,
        burst,
        end + s.echo_settle + s.echo_record,
        s.dt_for(cfg),
    )?;
    let spec = tail_spectrum(&bs, end, s)?;
    let est = peak_estimate(&spec, s.band.resolve(cfg.nominal_fp()), Method::Ringdown)?;
    Ok((spec, est))
}

/// Linear chirp over `f0..f1` lasting `duration`; returns the tail
/// magnitude spectrum (no phase) and its peak.
pub fn chirp_measure(
    cfg: &ChannelConfig,
    f0: f64,
    f1: f64,
    duration: f64,
    s: &MeasureSettings,
) -> Result<(Spectrum, ResonanceEstimate), ExperimentError> {
    let channel = s.pulse_channel(cfg);
    let chirp = Waveform::Chirp {
        amplitude: s.amplitude,
        f0,
        f1,
        duration,
        start: 0.0,
    };
    let bs = run_backscatter(
        &channel,
        chirp,
        duration + s.echo_settle + s.echo_record,
        s.dt_for(cfg),
    )?;
    let spec = tail_spectrum(&bs, duration, s)?;
    let (lo, hi) = (f0.min(f1), f0.max(f1));
    let (blo, bhi) = s.band.resolve(cfg.nominal_fp());
    let band = (blo.max(lo), bhi.min(hi));
    if band.0 >= band.1 {
        return Err(DspError::NoPeak { lo, hi }.into());
    }
    let est = peak_estimate(&spec, band, Method::Chirp)?;
    Ok((spec, est))
}

/// Steady-state response `V(ei) / V(src)` to a continuous sine at `f`.
///
/// The simulation starts from the discrete periodic steady state, so the
/// first integrated cycle is already settled; the lock-in still discards
/// `lockin_settle` cycles before integrating `lockin_cycles`.
pub fn cw_response(
    cfg: &ChannelConfig,
    f: f64,
    s: &MeasureSettings,
) -> Result<Complex64, ExperimentError> {
    let circuit = build_channel(cfg, Waveform::sine(s.amplitude, f))?;
    let dt = s.dt_for(cfg);
    let probe = format!("V({})", nodes::INTERROGATOR);
    let mut session = Session::open(&circuit, dt, &[probe.clone()])?;
    session.init_periodic(f)?;
    let cycles = s.lockin_settle + s.lockin_cycles as f64;
    let steps = (cycles / (f * dt)).ceil() as usize + 1;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(session.values()[0]);
    for _ in 0..steps {
        samples.push(session.step()?[0]);
    }
    let trace = Trace::new(probe, samples, 1.0 / dt);
    let li = lockin_window(&trace, f, s.lockin_settle, Some(s.lockin_cycles))?;
    Ok(Complex64::from_polar(
        li.amplitude / s.amplitude,
        li.phase.unwrap_or(0.0),
    ))
}

/// Lock-in response on `grid`, one steady-state simulation per frequency.
pub fn bode_measure(
    cfg: &ChannelConfig,
    grid: &[f64],
    s: &MeasureSettings,
) -> Result<FrequencyResponse, ExperimentError> {
    let values = grid
        .iter()
        .map(|&f| cw_response(cfg, f, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrequencyResponse::new(grid.to_vec(), values))
}

/// The USN shows up in the interrogator's response as a narrow absorption
/// notch. On the coarse grid the notch is the point deepest below the mean
/// of its neighbours `reach` points away; it is then refined on `|H|`.
pub fn bode_resonance(
    cfg: &ChannelConfig,
    expected: f64,
    s: &MeasureSettings,
) -> Result<ResonanceEstimate, ExperimentError> {
    let (below, above) = s.bode_search;
    let lo = expected - below;
    let hi = expected + above;
    let points = ((hi - lo) / s.bode_step).ceil() as usize + 1;
    let grid = linspace(lo, hi, points.max(3));
    let mags = bode_measure(cfg, &grid, s)?.magnitudes();
    let reach = 5.min((mags.len() - 1) / 2).max(1);
    let mut best: Option<(usize, f64)> = None;
    for k in 0..mags.len() {
        let left = mags[k.saturating_sub(reach)];
        let right = mags[(k + reach).min(mags.len() - 1)];
        let ratio = mags[k] / (0.5 * (left + right));
        if best.is_none_or(|(_, r)| ratio < r) {
            best = Some((k, ratio));
        }
    }
    let (k, _) = best.ok_or(ExperimentError::NoPeak)?;
    if k == 0 || k == mags.len() - 1 {
        return Err(DspError::NoPeak { lo, hi }.into());
    }
    let mag = |f: f64| cw_response(cfg, f, s).map(|h| h.norm());
    let f_p = refine_extremum(mag, grid[k - 1], grid[k + 1], 9, s.bode_tolerance, false)?;
    Ok(ResonanceEstimate {
        f_s: None,
        f_p,
        method: Method::Bode,
        band: (lo, hi),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllGains {
    /// Hz per rad.
    pub kp: f64,
    /// Hz per rad per iteration.
    pub ki: f64,
}

impl PllGains {
    /// `K_p = 0.3 / |slope|`, `K_i = 0.1 K_p` for a phase slope in rad/Hz.
    pub fn from_slope(slope: f64) -> Result<Self, DspError> {
        let kp = 0.3 / slope.abs();
        if !kp.is_finite() {
            return Err(DspError::BadArgument(format!("phase slope {slope}")));
        }
        Ok(Self { kp, ki: 0.1 * kp })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllLogEntry {
    pub iteration: usize,
    pub c_load: f64,
    pub frequency: f64,
    pub phase_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PllState {
    /// Frequency the oscillator will use next.
    pub frequency: f64,
    /// Frequency the loop started from; the PI output is relative to it.
    pub center: f64,
    pub setpoint: f64,
    pub gains: PllGains,
    /// Sign of the phase slope at the setpoint.
    pub direction: f64,
    pub integrator: f64,
    pub band: (f64, f64),
    pub pinned: usize,
    pub log: Vec<PllLogEntry>,
}

impl PllState {
    pub fn new(
        center: f64,
        setpoint: f64,
        gains: PllGains,
        direction: f64,
        band: (f64, f64),
    ) -> Self {
        Self {
            frequency: center,
            center,
            setpoint,
            gains,
            direction: direction.signum(),
            integrator: 0.0,
            band,
            pinned: 0,
            log: Vec::new(),
        }
    }
}

fn wrap_phase(p: f64) -> f64 {
    let w = p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Runs the loop for one iteration per entry of `schedule` (the load in
/// farads during that iteration). Each iteration measures the steady-state
/// phase at the current frequency and applies a PI update.
pub fn pll_track(
    cfg: &ChannelConfig,
    mut state: PllState,
    schedule: &[f64],
    s: &MeasureSettings,
) -> Result<PllState, ExperimentError> {
    for &c_load in schedule {
        let cell = cfg.clone().with_load(c_load);
        let h = cw_response(&cell, state.frequency, s)?;
        let error = wrap_phase(h.arg() - state.setpoint);
        let iteration = state.log.len();
        state.log.push(PllLogEntry {
            iteration,
            c_load,
            frequency: state.frequency,
            phase_error: error,
        });
        let g = state.gains;
        let proposal =
            state.center - state.direction * (g.kp * error + g.ki * (state.integrator + error));
        let (lo, hi) = state.band;
        if proposal <= lo || proposal >= hi {
            state.pinned += 1;
            state.frequency = proposal.clamp(lo, hi);
            if state.pinned > s.pll_pin_limit {
                return Err(DspError::LossOfLock {
                    iteration,
                    frequency: state.frequency,
                }
                .into());
            }
        } else {
            state.pinned = 0;
            state.integrator += error;
            state.frequency = proposal;
        }
    }
    Ok(state)
}

/// Locks onto the unloaded channel: the setpoint is the phase at its bode
/// resonance and the gains come from the local phase slope.
pub fn pll_calibrate(
    cfg: &ChannelConfig,
    s: &MeasureSettings,
) -> Result<PllState, ExperimentError> {
    let unloaded = cfg.clone().with_load(0.0);
    let f_p = bode_resonance(&unloaded, cfg.nominal_fp(), s)?.f_p;
    let setpoint = cw_response(&unloaded, f_p, s)?.arg();
    let delta = 4.0 * s.bode_tolerance;
    let up = cw_response(&unloaded, f_p + delta, s)?.arg();
    let down = cw_response(&unloaded, f_p - delta, s)?.arg();
    let slope = wrap_phase(up - down) / (2.0 * delta);
    let gains = PllGains::from_slope(slope)?;
    Ok(PllState::new(
        f_p,
        setpoint,
        gains,
        slope.signum(),
        s.pll_band.resolve(cfg.nominal_fp()),
    ))
}

/// Calibrates the loop on the unloaded channel and tracks each load in
/// turn. The estimate for a load is the oscillator frequency after its
/// iterations.
pub fn pll_sweep(
    cfg: &ChannelConfig,
    loads: &[f64],
    s: &MeasureSettings,
) -> Vec<Result<ResonanceEstimate, ExperimentError>> {
    let mut state = match pll_calibrate(cfg, s) {
        Ok(st) => st,
        Err(e) => return loads.iter().map(|_| Err(e.clone())).collect(),
    };
    let mut out = Vec::with_capacity(loads.len());
    for &c_load in loads {
        let schedule = vec![c_load; s.pll_iterations];
        match pll_track(cfg, state.clone(), &schedule, s) {
            Ok(next) => {
                out.push(Ok(ResonanceEstimate {
                    f_s: None,
                    f_p: next.frequency,
                    method: Method::Pll,
                    band: next.band,
                }));
                state = next;
            }
            Err(e) => {
                out.push(Err(e));
                state.pinned = 0;
            }
        }
    }
    out
}
