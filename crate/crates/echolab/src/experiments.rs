//! Channel construction, resonance extraction and the load sweep.
//!
//! The channel is a source with output resistance `Rs` driving the
//! interrogator's electrical port, the interrogator's front face coupled to
//! the sensor node (USN) through the air ladder, and the USN's electrical port
//! shunted by the load capacitance. Both back faces see the backing
//! impedance, which is zero for air backing and is then realised as a
//! zero-ohm resistor (a short that keeps the termination configurable).

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::circuit::{add_piezo, solve_ac, Circuit, CircuitError, Element, ElementKind, Waveform};
use crate::dsp::{self, DspError, FrequencyResponse};
use crate::piezo::{AirChannelParams, LoadConfig, ParamError, TransducerParams};
use crate::transient::{run_transient, Trace, TransientConfig, TransientError, STEPS_PER_DELAY};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Transient(#[from] TransientError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("|cos theta| = {cos:e} is too close to a pole of the impedance")]
    PoleProximity { cos: f64 },
    #[error("no resonance peak in the response")]
    NoPeak,
    #[error("the load list must contain 0 F as the reference")]
    MissingReference,
}

/// Node names used by [`build_channel`].
pub mod nodes {
    pub const SOURCE: &str = "src";
    pub const INTERROGATOR: &str = "ei";
    pub const INTERROGATOR_BACK: &str = "bi";
    pub const INTERROGATOR_FRONT: &str = "fi";
    pub const USN: &str = "eu";
    pub const USN_BACK: &str = "bu";
    pub const USN_FRONT: &str = "fu";
}

pub const DRIVE_SOURCE: &str = "VS";
pub const DEFAULT_SOURCE_RESISTANCE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub interrogator: TransducerParams,
    pub usn: TransducerParams,
    pub air: AirChannelParams,
    pub load: LoadConfig,
    /// Backing impedance of the USN, kg/s.
    pub z_back: f64,
    /// Backing impedance of the interrogator, kg/s.
    pub z_back_ext: f64,
    /// Output resistance of the drive amplifier, ohm.
    pub source_resistance: f64,
}

impl ChannelConfig {
    pub fn new(params: TransducerParams, air: AirChannelParams) -> Self {
        Self {
            interrogator: params,
            usn: params,
            air,
            load: LoadConfig::default(),
            z_back: 0.0,
            z_back_ext: 0.0,
            source_resistance: DEFAULT_SOURCE_RESISTANCE,
        }
    }

    /// Identical transducers from `params` and the air gap on its area.
    pub fn from_params(params: TransducerParams) -> Self {
        Self::new(params, AirChannelParams::table_i(params.area))
    }

    pub fn table_i_stated() -> Self {
        Self::from_params(TransducerParams::table_i_stated())
    }

    pub fn with_load(mut self, c_load: f64) -> Self {
        self.load = LoadConfig { c_load };
        self
    }

    pub fn with_segments(mut self, segments: usize) -> Self {
        self.air.segments = segments;
        self
    }

    /// Unloaded parallel resonance of the transducers.
    pub fn nominal_fp(&self) -> f64 {
        self.usn.parallel_resonance()
    }

    pub fn check(&self) -> Result<(), ParamError> {
        self.interrogator.screen()?;
        self.usn.screen()?;
        LoadConfig::new(self.load.c_load)?;
        for (name, v) in [
            ("Z_B", self.z_back),
            ("Z_B_ext", self.z_back_ext),
            ("Rs", self.source_resistance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ParamError::OutOfRange {
                    name,
                    value: v,
                    reason: "must be finite and non-negative",
                });
            }
        }
        if self.air.segments == 0 {
            return Err(ParamError::OutOfRange {
                name: "segments",
                value: 0.0,
                reason: "need at least one segment",
            });
        }
        Ok(())
    }
}

/// Builds the channel circuit with `drive` on the source. The probe for the
/// interrogator port is node [`nodes::INTERROGATOR`].
pub fn build_channel(cfg: &ChannelConfig, drive: Waveform) -> Result<Circuit, ExperimentError> {
    assemble_channel(cfg, drive, true)
}

/// The channel with the USN replaced by a resistor equal to the air
/// ladder's characteristic impedance, so nothing comes back from the far
/// end. Subtracting its response from [`build_channel`]'s isolates the echo.
pub fn build_reference_channel(
    cfg: &ChannelConfig,
    drive: Waveform,
) -> Result<Circuit, ExperimentError> {
    assemble_channel(cfg, drive, false)
}

fn assemble_channel(
    cfg: &ChannelConfig,
    drive: Waveform,
    with_usn: bool,
) -> Result<Circuit, ExperimentError> {
    cfg.check()?;
    use nodes::*;
    let mut c = Circuit::new();
    c.vsource(DRIVE_SOURCE, SOURCE, "0", drive);
    c.resistor("RS", SOURCE, INTERROGATOR, cfg.source_resistance);
    add_piezo(
        &mut c,
        "XI",
        &cfg.interrogator,
        (INTERROGATOR, "0"),
        (INTERROGATOR_BACK, "0"),
        (INTERROGATOR_FRONT, "0"),
    )?;
    c.resistor("RBI", INTERROGATOR_BACK, "0", cfg.z_back_ext);
    let (p1, p2) = (c.node(INTERROGATOR_FRONT), c.node(USN_FRONT));
    c.add(Element::new(
        "OAIR",
        ElementKind::LossyLine {
            p1,
            n1: 0,
            p2,
            n2: 0,
            r_per_m: cfg.air.r_per_m,
            l_per_m: cfg.air.l_per_m,
            c_per_m: cfg.air.c_per_m,
            length: cfg.air.gap,
            segments: cfg.air.segments,
        },
    ));
    if !with_usn {
        c.resistor("RTERM", USN_FRONT, "0", cfg.air.characteristic_impedance());
        return Ok(c);
    }
    add_piezo(
        &mut c,
        "XU",
        &cfg.usn,
        (USN, "0"),
        (USN_BACK, "0"),
        (USN_FRONT, "0"),
    )?;
    c.resistor("RBU", USN_BACK, "0", cfg.z_back);
    if cfg.load.c_load > 0.0 {
        c.capacitor("CL", USN, "0", cfg.load.c_load);
    }
    Ok(c)
}

/// Time step used for channel simulations: the line-delay limit of the
/// faster transducer, which keeps every delay a whole number of steps.
pub fn channel_dt(cfg: &ChannelConfig) -> f64 {
    cfg.interrogator.tau_c.min(cfg.usn.tau_c) / STEPS_PER_DELAY
}

/// Result of one pulse-echo simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Backscatter {
    /// Drive voltage at the source terminal.
    pub tx: Trace,
    /// Interrogator port voltage over the whole run.
    pub received: Trace,
    /// `received` from one excitation cycle after the excitation ends.
    pub echo: Trace,
}

/// Simulates the channel under `excitation` for `duration` seconds.
pub fn run_backscatter(
    cfg: &ChannelConfig,
    excitation: Waveform,
    duration: f64,
    dt: f64,
) -> Result<Backscatter, ExperimentError> {
    let gate = echo_gate(&excitation);
    let circuit = build_channel(cfg, excitation)?;
    let probes = [
        format!("V({})", nodes::SOURCE),
        format!("V({})", nodes::INTERROGATOR),
    ];
    let tcfg = TransientConfig {
        dt,
        duration,
        probes: probes.to_vec(),
    };
    let mut traces = run_transient(&circuit, &tcfg)?.into_iter();
    let tx = traces.next().expect("two probes");
    let received = traces.next().expect("two probes");
    let echo = received.slice_from(gate);
    Ok(Backscatter { tx, received, echo })
}

/// End of the excitation plus one cycle of its lowest frequency.
fn echo_gate(excitation: &Waveform) -> f64 {
    match *excitation {
        Waveform::SineBurst { frequency, .. } => {
            excitation.active_until().unwrap_or(0.0) + 1.0 / frequency
        }
        Waveform::Chirp { f0, f1, .. } => {
            excitation.active_until().unwrap_or(0.0) + 1.0 / f0.min(f1)
        }
        _ => excitation.active_until().unwrap_or(0.0),
    }
}

/// Fraction of the peak echo amplitude that marks the echo onset.
pub const ONSET_FRACTION: f64 = 0.05;

/// Time after excitation start at which the echo first reaches
/// [`ONSET_FRACTION`] of its peak. The echo is the difference between the
/// channel and the anechoic reference channel at the interrogator port,
/// which removes the drive feed-through and the interrogator's own ringing.
pub fn echo_onset(
    cfg: &ChannelConfig,
    excitation: Waveform,
    duration: f64,
    dt: f64,
) -> Result<f64, ExperimentError> {
    let start = match excitation {
        Waveform::SineBurst { start, .. } | Waveform::Chirp { start, .. } => start,
        Waveform::Pulse { delay, .. } => delay,
        _ => 0.0,
    };
    let tcfg = TransientConfig {
        dt,
        duration,
        probes: vec![format!("V({})", nodes::INTERROGATOR)],
    };
    let with = run_transient(&build_channel(cfg, excitation.clone())?, &tcfg)?;
    let without = run_transient(&build_reference_channel(cfg, excitation)?, &tcfg)?;
    let diff: Vec<f64> = with[0]
        .samples
        .iter()
        .zip(&without[0].samples)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let peak = diff.iter().fold(0.0, |m: f64, v| m.max(*v));
    if peak == 0.0 {
        return Err(ExperimentError::NoPeak);
    }
    let k = diff
        .iter()
        .position(|v| *v >= ONSET_FRACTION * peak)
        .expect("the peak itself qualifies");
    Ok(with[0].time(k) - start)
}

/// Thickness-mode input impedance of an air-backed disc with coupling
/// `k^2`: `(1/(j w C0)) (1 - k^2 tan(theta)/theta)`, `theta = w tau_c / 2`.
pub fn analytic_impedance_k2(
    c0: f64,
    tau_c: f64,
    k2: f64,
    omega: f64,
) -> Result<Complex64, ExperimentError> {
    let theta = omega * tau_c / 2.0;
    let cos = theta.cos();
    if cos.abs() < 1e-6 {
        return Err(ExperimentError::PoleProximity { cos });
    }
    let factor = 1.0 - k2 * theta.tan() / theta;
    Ok(Complex64::new(0.0, -factor / (omega * c0)))
}

/// Analytic impedance using the tabulated coupling factor `K_t`.
pub fn analytic_impedance(
    params: &TransducerParams,
    omega: f64,
) -> Result<Complex64, ExperimentError> {
    let k = params.base.coupling;
    analytic_impedance_k2(params.c0, params.tau_c, k * k, omega)
}

/// Root of `k^2 tan(theta)/theta = 1` below `pi/2`, as a fraction of the
/// parallel resonance.
pub fn analytic_series_ratio(k2: f64) -> f64 {
    let g = |t: f64| k2 * t.tan() / t - 1.0;
    let (mut lo, mut hi) = (1e-9, PI / 2.0 - 1e-15);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi) / (PI / 2.0)
}

/// Electrical impedance of a lone transducer with shorted acoustic ports,
/// computed by the AC engine.
pub fn piezo_impedance(
    params: &TransducerParams,
    omega: f64,
) -> Result<Complex64, ExperimentError> {
    let mut c = Circuit::new();
    c.vsource("VP", "e", "0", Waveform::sine(1.0, omega / (2.0 * PI)));
    add_piezo(&mut c, "X", params, ("e", "0"), ("0", "0"), ("0", "0"))?;
    let i = solve_ac(&c, omega)?.current("VP").expect("source current");
    Ok(-1.0 / i)
}

/// Which complex quantity an AC sweep of the channel records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcQuantity {
    /// `V(ei) / Vs`, what the interrogator sees.
    Transfer,
    /// Impedance looking into the loaded USN port (load included).
    UsnImpedance,
    /// Impedance looking into the interrogator port.
    InterrogatorImpedance,
}

pub fn ac_point(
    cfg: &ChannelConfig,
    quantity: AcQuantity,
    f: f64,
) -> Result<Complex64, ExperimentError> {
    let omega = 2.0 * PI * f;
    match quantity {
        AcQuantity::Transfer => {
            let c = build_channel(cfg, Waveform::sine(1.0, f))?;
            Ok(solve_ac(&c, omega)?
                .voltage(nodes::INTERROGATOR)
                .expect("probe"))
        }
        AcQuantity::InterrogatorImpedance => {
            let cfg = ChannelConfig {
                source_resistance: 0.0,
                ..cfg.clone()
            };
            let c = build_channel(&cfg, Waveform::sine(1.0, f))?;
            Ok(-1.0 / solve_ac(&c, omega)?.current(DRIVE_SOURCE).expect("source"))
        }
        AcQuantity::UsnImpedance => {
            let mut c = build_channel(cfg, Waveform::Dc(0.0))?;
            c.vsource("VPROBE", "probe", "0", Waveform::sine(1.0, f));
            c.resistor("RPROBE", "probe", nodes::USN, 0.0);
            let v = solve_ac(&c, omega)?;
            Ok(-1.0 / v.current("VPROBE").expect("probe"))
        }
    }
}

/// AC sweep over an explicit frequency grid.
pub fn ac_sweep(
    cfg: &ChannelConfig,
    quantity: AcQuantity,
    freqs: &[f64],
) -> Result<FrequencyResponse, ExperimentError> {
    let values = freqs
        .iter()
        .map(|&f| ac_point(cfg, quantity, f))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrequencyResponse::new(freqs.to_vec(), values))
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ac,
    Ringdown,
    Chirp,
    Bode,
    Pll,
    Analytic,
}

impl Method {
    pub const TABLE: [Method; 5] = [
        Method::Ac,
        Method::Ringdown,
        Method::Chirp,
        Method::Bode,
        Method::Pll,
    ];
    pub const OPEN_LOOP: [Method; 3] = [Method::Ringdown, Method::Chirp, Method::Bode];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Ac => "ac",
            Method::Ringdown => "ringdown",
            Method::Chirp => "chirp",
            Method::Bode => "bode",
            Method::Pll => "pll",
            Method::Analytic => "analytic",
        }
    }

    pub fn parse(tag: &str) -> Option<Method> {
        [
            Method::Ac,
            Method::Ringdown,
            Method::Chirp,
            Method::Bode,
            Method::Pll,
            Method::Analytic,
        ]
        .into_iter()
        .find(|m| m.tag().eq_ignore_ascii_case(tag))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceEstimate {
    /// Series resonance, when the method can see it.
    pub f_s: Option<f64>,
    /// Parallel (anti-)resonance.
    pub f_p: f64,
    pub method: Method,
    pub band: (f64, f64),
}

/// Refines an extremum at interior index `k` of `y` with a parabola through
/// three points; returns the fractional offset in `(-0.5, 0.5)` and the
/// interpolated value.
pub fn parabolic(y: &[f64], k: usize) -> (f64, f64) {
    let (a, b, c) = (y[k - 1], y[k], y[k + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        return (0.0, b);
    }
    let p = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
    (p, b - 0.25 * (a - c) * p)
}

fn refined_extremum(freqs: &[f64], mags: &[f64], lo: usize, hi: usize, max: bool) -> Option<f64> {
    if hi < lo + 2 {
        return None;
    }
    let sign = if max { 1.0 } else { -1.0 };
    let logs: Vec<f64> = mags.iter().map(|m| sign * m.max(1e-300).ln()).collect();
    let k = (lo..=hi).max_by(|&a, &b| logs[a].total_cmp(&logs[b]))?;
    if k == lo || k == hi {
        return None;
    }
    if logs[k] <= logs[k - 1] && logs[k] <= logs[k + 1] {
        return None;
    }
    let (p, _) = parabolic(&logs, k);
    let step = if p >= 0.0 {
        freqs[k + 1] - freqs[k]
    } else {
        freqs[k] - freqs[k - 1]
    };
    Some(freqs[k] + p * step)
}

/// `f_p` = refined argmax of the magnitude, `f_s` = refined argmin below it.
pub fn find_resonances(
    resp: &FrequencyResponse,
    method: Method,
) -> Result<ResonanceEstimate, ExperimentError> {
    let mags = resp.magnitudes();
    let n = mags.len();
    if n < 3 {
        return Err(ExperimentError::NoPeak);
    }
    let f_p =
        refined_extremum(&resp.freqs, &mags, 0, n - 1, true).ok_or(ExperimentError::NoPeak)?;
    let kp = resp.freqs.partition_point(|&f| f < f_p);
    let f_s = refined_extremum(&resp.freqs, &mags, 0, kp.saturating_sub(1), false);
    Ok(ResonanceEstimate {
        f_s,
        f_p,
        method,
        band: (resp.freqs[0], resp.freqs[n - 1]),
    })
}

/// Finds the extremum of `quantity` near `guess` by successive grid
/// refinement: a coarse grid over `[lo, hi]`, then grids of `points` around
/// the best point, each 8 times narrower, until the spacing drops below
/// `tol` hertz.
pub fn refine_extremum(
    mut eval: impl FnMut(f64) -> Result<f64, ExperimentError>,
    lo: f64,
    hi: f64,
    points: usize,
    tol: f64,
    max: bool,
) -> Result<f64, ExperimentError> {
    let (mut a, mut b) = (lo, hi);
    loop {
        let freqs = linspace(a, b, points);
        let vals = freqs
            .iter()
            .map(|&f| eval(f))
            .collect::<Result<Vec<_>, _>>()?;
        let best =
            refined_extremum(&freqs, &vals, 0, points - 1, max).ok_or(ExperimentError::NoPeak)?;
        let step = (b - a) / (points - 1) as f64;
        if step < tol {
            return Ok(best);
        }
        let half = step * (points - 1) as f64 / 16.0;
        a = best - half.max(2.0 * step);
        b = best + half.max(2.0 * step);
    }
}

/// Reference AC estimate for the loaded USN: `f_s` is the minimum of the
/// loaded port impedance below the nominal resonance and `f_p` its maximum
/// above `f_s`. `tol` is the final grid spacing in hertz.
///
/// A large load pulls `f_p` to within a few hertz of `f_s`, too close for a
/// coarse grid, so `f_p` is first bracketed by the point where the port
/// susceptance turns from inductive back to capacitive.
pub fn ac_resonance(cfg: &ChannelConfig, tol: f64) -> Result<ResonanceEstimate, ExperimentError> {
    let f0 = cfg.nominal_fp();
    let (lo, hi) = (0.85 * f0, 1.02 * f0);
    let z = |f: f64| ac_point(cfg, AcQuantity::UsnImpedance, f);
    let mag = |f: f64| z(f).map(|z| z.norm());
    let susceptance = |f: f64| z(f).map(|z| (1.0 / z).im);
    let f_s = match refine_extremum(mag, lo, f0, 41, tol, false) {
        Ok(f) => f,
        // A heavy load hides the series dip under its own reactance except
        // within a fraction of a hertz; search a narrow window around the
        // unloaded f_s instead. A moved f_s lands on the window edge and
        // fails rather than being pulled back.
        Err(ExperimentError::NoPeak) if cfg.load.c_load > 0.0 => {
            let anchor = ac_resonance(&cfg.clone().with_load(0.0), tol)?
                .f_s
                .ok_or(ExperimentError::NoPeak)?;
            refine_extremum(mag, anchor - 1.0, anchor + 1.0, 41, tol, false)?
        }
        Err(e) => return Err(e),
    };

    // first inductive point above f_s, then bisect up to the capacitive edge
    let mut delta = 1e-6;
    let mut left = None;
    while f_s + delta < hi {
        if susceptance(f_s + delta)? < 0.0 {
            left = Some(f_s + delta);
            break;
        }
        delta *= 1.25;
    }
    let mut a = left.ok_or(ExperimentError::NoPeak)?;
    let mut b = hi;
    if susceptance(b)? <= 0.0 {
        return Err(ExperimentError::NoPeak);
    }
    while b - a > tol {
        let m = 0.5 * (a + b);
        if susceptance(m)? < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let left = left.expect("checked above");
    let width = (b - left).max(4.0 * tol);
    let f_p = refine_extremum(mag, left, (b + width).min(hi), 41, tol, true)?;
    Ok(ResonanceEstimate {
        f_s: Some(f_s),
        f_p,
        method: Method::Ac,
        band: (lo, hi),
    })
}

/// One row of a [`ShiftTable`]. `None` marks a failed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRow {
    pub c_load: f64,
    pub f_p: Vec<Option<f64>>,
    pub f_s: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTable {
    pub methods: Vec<Method>,
    pub rows: Vec<ShiftRow>,
}

impl ShiftTable {
    fn column(&self, m: Method) -> Option<usize> {
        self.methods.iter().position(|&x| x == m)
    }

    pub fn f_p(&self, row: usize, m: Method) -> Option<f64> {
        self.rows[row].f_p[self.column(m)?]
    }

    pub fn f_s(&self, row: usize, m: Method) -> Option<f64> {
        self.rows[row].f_s[self.column(m)?]
    }

    fn reference_row(&self) -> Option<&ShiftRow> {
        self.rows.iter().find(|r| r.c_load == 0.0)
    }

    /// `f_p(C_L) - f_p(0)`; exactly zero on the reference row.
    pub fn shift(&self, row: usize, m: Method) -> Option<f64> {
        let col = self.column(m)?;
        let r = &self.rows[row];
        if r.c_load == 0.0 {
            return r.f_p[col].map(|_| 0.0);
        }
        Some(r.f_p[col]? - self.reference_row()?.f_p[col]?)
    }

    pub fn series_shift(&self, row: usize, m: Method) -> Option<f64> {
        let col = self.column(m)?;
        let r = &self.rows[row];
        if r.c_load == 0.0 {
            return r.f_s[col].map(|_| 0.0);
        }
        Some(r.f_s[col]? - self.reference_row()?.f_s[col]?)
    }

    /// CSV with columns `C_L_F`, `f_p_<method>`..., `shift_<method>`...,
    /// `f_s_<method>`.... Failed cells hold `FAILED`. Shifts follow
    /// `shift = f_p(C_L) - f_p(0)`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "FAILED".to_string(), |x| format!("{x}"));
        let mut header = vec!["C_L_F".to_string()];
        for prefix in ["f_p", "shift", "f_s"] {
            header.extend(self.methods.iter().map(|m| format!("{prefix}_{}", m.tag())));
        }
        writeln!(out, "{}", header.join(","))?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut cells = vec![format!("{}", r.c_load)];
            cells.extend(r.f_p.iter().map(|v| fmt(*v)));
            cells.extend(self.methods.iter().map(|&m| fmt(self.shift(i, m))));
            cells.extend(r.f_s.iter().map(|v| fmt(*v)));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub const DEFAULT_LOADS: [f64; 8] = [0.0, 0.25e-9, 0.5e-9, 1e-9, 2e-9, 2.5e-9, 5e-9, 10e-9];

/// Measures every method at every load. Cells that fail keep their error
/// message and do not stop the sweep.
pub fn sweep_load(
    cfg: &ChannelConfig,
    loads: &[f64],
    methods: &[Method],
    settings: &dsp::MeasureSettings,
) -> Result<ShiftTable, ExperimentError> {
    if !loads.contains(&0.0) {
        return Err(ExperimentError::MissingReference);
    }
    let mut rows: Vec<ShiftRow> = loads
        .iter()
        .map(|&c_load| ShiftRow {
            c_load,
            f_p: vec![None; methods.len()],
            f_s: vec![None; methods.len()],
            errors: vec![None; methods.len()],
        })
        .collect();
    for (col, &m) in methods.iter().enumerate() {
        let results: Vec<Result<ResonanceEstimate, ExperimentError>> = match m {
            Method::Pll => dsp::pll_sweep(cfg, loads, settings),
            _ => {
                let mut out = Vec::new();
                let mut drive = cfg.nominal_fp();
                for &c_load in loads {
                    let cell = cfg.clone().with_load(c_load);
                    let r = measure(&cell, m, drive, settings);
                    if let Ok(est) = &r {
                        drive = est.f_p;
                    }
                    out.push(r);
                }
                out
            }
        };
        for (row, r) in rows.iter_mut().zip(results) {
            match r {
                Ok(est) => {
                    row.f_p[col] = Some(est.f_p);
                    row.f_s[col] = est.f_s;
                }
                Err(e) => row.errors[col] = Some(e.to_string()),
            }
        }
    }
    Ok(ShiftTable {
        methods: methods.to_vec(),
        rows,
    })
}

/// Runs one open-loop method. `drive` is the burst frequency for ringdown
/// (the previous row's estimate during a sweep).
pub fn measure(
    cfg: &ChannelConfig,
    method: Method,
    drive: f64,
    settings: &dsp::MeasureSettings,
) -> Result<ResonanceEstimate, ExperimentError> {
    match method {
        Method::Ac => ac_resonance(cfg, settings.ac_tolerance),
        Method::Ringdown => dsp::ringdown_measure(cfg, drive, settings),
        Method::Chirp => {
            let (f0, f1) = settings.chirp_span.resolve(cfg.nominal_fp());
            dsp::chirp_measure(cfg, f0, f1, settings.chirp_duration, settings).map(|(_, e)| e)
        }
        Method::Bode => dsp::bode_resonance(cfg, drive, settings),
        Method::Pll => dsp::pll_sweep(cfg, &[cfg.load.c_load], settings)
            .pop()
            .expect("one load"),
        Method::Analytic => {
            let k = cfg.usn.effective_coupling();
            let f_p = cfg.nominal_fp();
            Ok(ResonanceEstimate {
                f_s: Some(analytic_series_ratio(k * k) * f_p),
                f_p,
                method,
                band: (0.7 * f_p, 1.05 * f_p),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_limits() {
        let p = TransducerParams::table_i_stated();
        let w = 2.0 * PI * 10.0;
        let z = analytic_impedance(&p, w).unwrap();
        assert!((z.norm() * w * p.c0 - 0.75).abs() < 1e-6);
        let wp = PI / p.tau_c;
        assert!(matches!(
            analytic_impedance(&p, wp),
            Err(ExperimentError::PoleProximity { .. })
        ));
        assert!((analytic_series_ratio(0.25) - 0.887).abs() < 1e-3);
    }

    #[test]
    fn channel_construction_counts() {
        let cfg = ChannelConfig::table_i_stated();
        let c = build_channel(&cfg, Waveform::Dc(0.0)).unwrap();
        assert!(c.element("CL").is_none());
        assert_eq!(c.elements().len(), 2 * 9 + 1 + 2 + 2);
        let flat = c.flattened();
        let ladder = |ch: char| {
            flat.elements()
                .iter()
                .filter(|e| e.name.starts_with("OAIR.") && e.kind.letter() == ch)
                .count()
        };
        assert_eq!((ladder('R'), ladder('L'), ladder('C')), (32, 32, 32));
        assert!(crate::circuit::validate(&c).is_empty());
        let loaded = build_channel(&cfg.clone().with_load(2e-9), Waveform::Dc(0.0)).unwrap();
        assert!(loaded.element("CL").is_some());
    }

    #[test]
    fn shift_table_reference_row_is_zero() {
        let t = ShiftTable {
            methods: vec![Method::Ac, Method::Bode],
            rows: vec![
                ShiftRow {
                    c_load: 0.0,
                    f_p: vec![Some(10.0), Some(11.0)],
                    f_s: vec![Some(9.0), None],
                    errors: vec![None, None],
                },
                ShiftRow {
                    c_load: 1e-9,
                    f_p: vec![Some(8.0), None],
                    f_s: vec![Some(9.0), None],
                    errors: vec![None, Some("x".into())],
                },
            ],
        };
        assert_eq!(t.shift(0, Method::Ac), Some(0.0));
        assert_eq!(t.shift(1, Method::Ac), Some(-2.0));
        assert_eq!(t.shift(1, Method::Bode), None);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("C_L_F,f_p_ac,f_p_bode,shift_ac,shift_bode,f_s_ac,f_s_bode\n"));
        assert!(text.contains("FAILED"));
    }
}
