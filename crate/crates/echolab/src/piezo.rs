//! Transducer and air-gap parameter sets.
//!
//! [`TransducerParams`] carries the base material and geometry constants of a
//! thickness-mode disc together with the electro-acoustic quantities derived
//! from them:
//!
//! * area `A = pi (D/2)^2`
//! * clamped capacitance `C0 = A eps33 / T`
//! * electrical length `tau_c = T / v`
//! * turn ratio `N = A e33 / T`
//! * piezoelectric constant `h = N / C0`
//! * radiation impedance `Zc = rho v A`
//!
//! Two built-in presets describe the reference disc. `tableI-stated` keeps the
//! published numeric values of `C0`, `h`, `N`, `A` and `Zc`; `tableI-derived`
//! recomputes everything from the base constants. The two disagree on `C0` by
//! a factor of about 100 (the published permittivity cannot produce the
//! published capacitance); [`consistency_report`] surfaces that gap instead of
//! hiding it. `tableI` is an alias of `tableI-stated`.
//!
//! [`AirChannelParams`] turns the air gap into per-metre line constants
//! `R' = 2 rho_a v_a A alpha`, `L' = A rho_a`, `C' = 1 / (A rho_a v_a^2)`, so
//! that `sqrt(L'/C') = rho_a v_a A` and `1/sqrt(L'C') = v_a`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::units::{parse_value, ValueError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("parameter {name} = {value} is out of range: {reason}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{file}:{line}: {message}")]
    PresetFile {
        file: String,
        line: usize,
        message: String,
    },
}

fn positive(name: &'static str, value: f64) -> Result<(), ParamError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ParamError::OutOfRange {
            name,
            value,
            reason: "must be finite and strictly positive",
        })
    }
}

/// Material and geometry constants of a thickness-mode disc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransducerBase {
    /// kg/m^3
    pub density: f64,
    /// m/s
    pub velocity: f64,
    /// F/m
    pub permittivity: f64,
    /// C/m^2
    pub stress_constant: f64,
    /// thickness coupling factor K_t
    pub coupling: f64,
    /// m
    pub diameter: f64,
    /// m
    pub thickness: f64,
}

impl TransducerBase {
    pub const TABLE_I: TransducerBase = TransducerBase {
        density: 7500.0,
        velocity: 3850.0,
        permittivity: 30e-9,
        stress_constant: 23.3,
        coupling: 0.5,
        diameter: 14e-3,
        thickness: 8e-3,
    };

    pub fn check(&self) -> Result<(), ParamError> {
        positive("rho", self.density)?;
        positive("v", self.velocity)?;
        positive("eps33", self.permittivity)?;
        positive("e33", self.stress_constant)?;
        positive("D", self.diameter)?;
        positive("T", self.thickness)?;
        if !(self.coupling > 0.0 && self.coupling < 1.0) {
            return Err(ParamError::OutOfRange {
                name: "Kt",
                value: self.coupling,
                reason: "coupling factor must lie in (0, 1)",
            });
        }
        Ok(())
    }
}

/// Base constants plus derived electro-acoustic quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransducerParams {
    pub base: TransducerBase,
    /// m^2
    pub area: f64,
    /// F
    pub c0: f64,
    /// s
    pub tau_c: f64,
    /// C/m
    pub turn_ratio: f64,
    /// V/m
    pub h: f64,
    /// specific acoustic impedance rho v, kg m^-2 s^-1
    pub z0: f64,
    /// radiation impedance rho v A, kg/s
    pub zc: f64,
}

/// The numeric column of the published parameter table, used as the
/// "stated" side of [`consistency_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatedTable {
    pub area: f64,
    pub c0: f64,
    pub tau_c: f64,
    pub turn_ratio: f64,
    pub h: f64,
    pub zc: f64,
    pub coupling: f64,
    pub r_air: f64,
    pub l_air: f64,
    pub c_air: f64,
}

impl StatedTable {
    pub const TABLE_I: StatedTable = StatedTable {
        area: 154e-6,
        c0: 58e-9,
        tau_c: 2e-6,
        turn_ratio: 0.4483,
        h: 7.86e6,
        zc: 4445.0,
        coupling: 0.5,
        r_air: 124e-3,
        l_air: 184e-6,
        c_air: 46e-3,
    };
}

impl TransducerParams {
    /// Computes every derived field from the base constants.
    pub fn derive(base: TransducerBase) -> Result<Self, ParamError> {
        base.check()?;
        let area = PI * (base.diameter / 2.0).powi(2);
        let c0 = area * base.permittivity / base.thickness;
        let turn_ratio = area * base.stress_constant / base.thickness;
        let z0 = base.density * base.velocity;
        Ok(Self {
            base,
            area,
            c0,
            tau_c: base.thickness / base.velocity,
            turn_ratio,
            h: turn_ratio / c0,
            z0,
            zc: z0 * area,
        })
    }

    pub fn table_i_derived() -> Self {
        Self::derive(TransducerBase::TABLE_I).expect("table constants are valid")
    }

    /// Published values for `A`, `C0`, `N`, `h` and `Zc`. The electrical
    /// length stays `T/v` (the table prints it rounded to 2 us).
    pub fn table_i_stated() -> Self {
        let stated = StatedTable::TABLE_I;
        let base = TransducerBase::TABLE_I;
        Self {
            base,
            area: stated.area,
            c0: stated.c0,
            tau_c: base.thickness / base.velocity,
            turn_ratio: stated.turn_ratio,
            h: stated.h,
            z0: base.density * base.velocity,
            zc: stated.zc,
        }
    }

    /// Checks everything the circuit expansion relies on.
    pub fn screen(&self) -> Result<(), ParamError> {
        self.base.check()?;
        positive("A", self.area)?;
        positive("C0", self.c0)?;
        positive("tau_c", self.tau_c)?;
        positive("Zc", self.zc)?;
        if !(self.h.is_finite() && self.h >= 0.0) {
            return Err(ParamError::OutOfRange {
                name: "h",
                value: self.h,
                reason: "must be finite and non-negative",
            });
        }
        if !self.turn_ratio.is_finite() {
            return Err(ParamError::OutOfRange {
                name: "N",
                value: self.turn_ratio,
                reason: "must be finite",
            });
        }
        Ok(())
    }

    /// Open-circuit (parallel) resonance of the unloaded disc, `v / 2T`.
    pub fn parallel_resonance(&self) -> f64 {
        0.5 / self.tau_c
    }

    /// Coupling implied by the circuit constants:
    /// `k^2 = h^2 C0 tau_c / Zc`. Equals `e33^2 / (eps33 rho v^2)` when every
    /// field is derived.
    pub fn effective_coupling(&self) -> f64 {
        (self.h * self.h * self.c0 * self.tau_c / self.zc).sqrt()
    }

    /// Same geometry with `C0` and `h` replaced, keeping `h C0 = N`.
    pub fn with_capacitance(mut self, c0: f64) -> Self {
        self.c0 = c0;
        self.h = self.turn_ratio / c0;
        self
    }
}

/// Air-gap constants and the per-metre line parameters derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirChannelParams {
    /// kg/m^3
    pub density: f64,
    /// m/s
    pub velocity: f64,
    /// m
    pub gap: f64,
    /// Np/m
    pub attenuation: f64,
    /// transducer area the line constants refer to, m^2
    pub area: f64,
    /// ohm/m
    pub r_per_m: f64,
    /// H/m
    pub l_per_m: f64,
    /// F/m
    pub c_per_m: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirBase {
    pub density: f64,
    pub velocity: f64,
    pub attenuation: f64,
    pub gap: f64,
}

impl AirBase {
    pub const TABLE_I: AirBase = AirBase {
        density: 1.2,
        velocity: 343.0,
        attenuation: 0.97,
        gap: 2e-3,
    };
}

pub const DEFAULT_SEGMENTS: usize = 32;

impl AirChannelParams {
    pub fn derive(base: AirBase, area: f64) -> Result<Self, ParamError> {
        positive("rho_a", base.density)?;
        positive("v_a", base.velocity)?;
        positive("d", base.gap)?;
        positive("A", area)?;
        if !(base.attenuation.is_finite() && base.attenuation >= 0.0) {
            return Err(ParamError::OutOfRange {
                name: "alpha",
                value: base.attenuation,
                reason: "must be finite and non-negative",
            });
        }
        Ok(Self {
            density: base.density,
            velocity: base.velocity,
            gap: base.gap,
            attenuation: base.attenuation,
            area,
            r_per_m: 2.0 * base.density * base.velocity * area * base.attenuation,
            l_per_m: area * base.density,
            c_per_m: 1.0 / (area * base.density * base.velocity * base.velocity),
            segments: DEFAULT_SEGMENTS,
        })
    }

    pub fn table_i(area: f64) -> Self {
        Self::derive(AirBase::TABLE_I, area).expect("table constants are valid")
    }

    pub fn with_segments(mut self, segments: usize) -> Self {
        self.segments = segments;
        self
    }

    /// `sqrt(L'/C')`, equal to `rho_a v_a A`.
    pub fn characteristic_impedance(&self) -> f64 {
        (self.l_per_m / self.c_per_m).sqrt()
    }

    /// One-way travel time across the gap.
    pub fn delay(&self) -> f64 {
        self.gap * (self.l_per_m * self.c_per_m).sqrt()
    }
}

/// Shunt capacitance across the sensor node's electrical port.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadConfig {
    /// Farad; zero leaves the port open.
    pub c_load: f64,
}

impl LoadConfig {
    pub fn new(c_load: f64) -> Result<Self, ParamError> {
        if !(c_load.is_finite() && c_load >= 0.0) {
            return Err(ParamError::OutOfRange {
                name: "C_L",
                value: c_load,
                reason: "must be finite and non-negative",
            });
        }
        Ok(Self { c_load })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRow {
    pub field: &'static str,
    pub formula: f64,
    pub stated: f64,
    pub relative_gap: f64,
    pub flagged: bool,
}

pub const CONSISTENCY_THRESHOLD: f64 = 0.05;

/// Compares formula values from `params` (and the air line built on its area)
/// against the published column. Rows whose relative gap exceeds 5% are
/// flagged.
pub fn consistency_report(
    params: &TransducerParams,
    air: &AirChannelParams,
    stated: &StatedTable,
) -> Vec<ConsistencyRow> {
    let b = &params.base;
    let area = PI * (b.diameter / 2.0).powi(2);
    let c0 = area * b.permittivity / b.thickness;
    let n = area * b.stress_constant / b.thickness;
    let rows = [
        ("A", area, stated.area),
        ("C0", c0, stated.c0),
        ("tau_c", b.thickness / b.velocity, stated.tau_c),
        ("N", n, stated.turn_ratio),
        ("h", n / c0, stated.h),
        ("Zc", b.density * b.velocity * area, stated.zc),
        ("Kt", params.effective_coupling(), stated.coupling),
        ("R_a", air.r_per_m, stated.r_air),
        ("L_a", air.l_per_m, stated.l_air),
        ("C_a", air.c_per_m, stated.c_air),
    ];
    rows.into_iter()
        .map(|(field, formula, stated)| {
            let relative_gap = ((formula - stated) / stated).abs();
            ConsistencyRow {
                field,
                formula,
                stated,
                relative_gap,
                flagged: relative_gap > CONSISTENCY_THRESHOLD,
            }
        })
        .collect()
}

/// Named transducer and air presets.
#[derive(Debug, Clone)]
pub struct PresetRegistry {
    transducers: BTreeMap<String, TransducerParams>,
    air: BTreeMap<String, AirBase>,
}

pub const DEFAULT_PRESET: &str = "tableI-stated";

impl Default for PresetRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PresetRegistry {
    pub fn builtin() -> Self {
        let mut transducers = BTreeMap::new();
        transducers.insert(
            "tableI-stated".to_string(),
            TransducerParams::table_i_stated(),
        );
        transducers.insert("tableI".to_string(), TransducerParams::table_i_stated());
        transducers.insert(
            "tableI-derived".to_string(),
            TransducerParams::table_i_derived(),
        );
        let mut air = BTreeMap::new();
        for name in ["tableI-stated", "tableI", "tableI-derived"] {
            air.insert(name.to_string(), AirBase::TABLE_I);
        }
        Self { transducers, air }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.transducers.keys().map(String::as_str)
    }

    pub fn transducer(&self, name: &str) -> Result<TransducerParams, ParamError> {
        self.transducers
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::UnknownPreset(name.to_string()))
    }

    pub fn air(&self, name: &str) -> Result<AirBase, ParamError> {
        self.air
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::UnknownPreset(name.to_string()))
    }

    pub fn insert(&mut self, name: &str, params: TransducerParams, air: AirBase) {
        self.transducers.insert(name.to_string(), params);
        self.air.insert(name.to_string(), air);
    }

    /// Loads every `*.preset` file in `dir`; the file stem becomes the preset
    /// name unless the file sets `name`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<Vec<String>, ParamError> {
        let mut loaded = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| ParamError::PresetFile {
            file: dir.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut paths: Vec<_> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "preset"))
            .collect();
        paths.sort();
        for path in paths {
            loaded.push(self.load_file(&path)?);
        }
        Ok(loaded)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<String, ParamError> {
        let text = fs::read_to_string(path).map_err(|e| ParamError::PresetFile {
            file: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let preset =
            parse_preset(&text, &stem, self).map_err(|(line, message)| ParamError::PresetFile {
                file: path.display().to_string(),
                line,
                message,
            })?;
        self.insert(&preset.name, preset.transducer, preset.air);
        Ok(preset.name)
    }
}

pub struct ParsedPreset {
    pub name: String,
    pub transducer: TransducerParams,
    pub air: AirBase,
}

/// Keys accepted in preset files, in file order. Base constants: `rho`, `v`,
/// `eps33`, `e33`, `Kt`, `D`, `T`. Derived overrides: `A`, `C0`, `tau_c`, `N`,
/// `h`, `Zc`. Air: `rho_a`, `v_a`, `d` (gap), `alpha`. Control: `name`,
/// `base` (start from another preset). Keys are case-sensitive because the
/// table uses `D` for the diameter and `d` for the gap.
pub const PRESET_KEYS: [&str; 19] = [
    "name", "base", "rho", "v", "eps33", "e33", "Kt", "D", "T", "A", "C0", "tau_c", "N", "h", "Zc",
    "rho_a", "v_a", "d", "alpha",
];

/// Parses `key = value` preset text. Derived quantities are recomputed from
/// the base constants unless the file states them explicitly.
pub fn parse_preset(
    text: &str,
    default_name: &str,
    registry: &PresetRegistry,
) -> Result<ParsedPreset, (usize, String)> {
    let mut name = default_name.to_string();
    let mut start = "tableI-derived".to_string();
    let mut values: Vec<(&str, f64, usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err((line_no, format!("expected key = value, found {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        let Some(&known) = PRESET_KEYS.iter().find(|k| **k == key) else {
            return Err((line_no, format!("unknown key {key:?}")));
        };
        match known {
            "name" => name = value.to_string(),
            "base" => start = value.to_string(),
            _ => {
                let v = parse_value(value).map_err(|e: ValueError| (line_no, e.to_string()))?;
                values.push((known, v, line_no));
            }
        }
    }
    let start_params = registry
        .transducer(&start)
        .map_err(|e| (0, e.to_string()))?;
    let mut air = registry.air(&start).map_err(|e| (0, e.to_string()))?;
    let mut base = start_params.base;
    for &(key, v, _) in &values {
        match key {
            "rho" => base.density = v,
            "v" => base.velocity = v,
            "eps33" => base.permittivity = v,
            "e33" => base.stress_constant = v,
            "Kt" => base.coupling = v,
            "D" => base.diameter = v,
            "T" => base.thickness = v,
            "rho_a" => air.density = v,
            "v_a" => air.velocity = v,
            "d" => air.gap = v,
            "alpha" => air.attenuation = v,
            _ => {}
        }
    }
    let base_changed = base != start_params.base;
    let mut params = if base_changed {
        TransducerParams::derive(base).map_err(|e| (0, e.to_string()))?
    } else {
        start_params
    };
    let mut h_set = false;
    for &(key, v, _) in &values {
        match key {
            "A" => params.area = v,
            "C0" => params.c0 = v,
            "tau_c" => params.tau_c = v,
            "N" => params.turn_ratio = v,
            "h" => {
                params.h = v;
                h_set = true;
            }
            "Zc" => params.zc = v,
            _ => {}
        }
    }
    if !h_set && values.iter().any(|(k, _, _)| matches!(*k, "C0" | "N")) {
        params.h = params.turn_ratio / params.c0;
    }
    params.screen().map_err(|e| (0, e.to_string()))?;
    Ok(ParsedPreset {
        name,
        transducer: params,
        air,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn derived_table_values() {
        let p = TransducerParams::table_i_derived();
        assert!(rel(p.area, 1.539e-4) < 1e-3);
        assert!(rel(p.area, 154e-6) < 0.01);
        assert!(rel(p.tau_c, 2.078e-6) < 1e-3);
        assert!(rel(p.turn_ratio, 0.4486) < 1e-3);
        assert!(rel(p.turn_ratio, 0.4483) < 0.01);
        assert!(rel(p.c0, 0.5773e-9) < 1e-3);
        assert!(rel(p.h, 7.76e8) < 0.01);
        assert!(rel(p.zc, 4444.0) < 1e-3);
        assert!(rel(p.h * p.c0, p.turn_ratio) < 1e-15);
        assert!(rel(p.parallel_resonance(), 240_625.0) < 1e-9);
    }

    #[test]
    fn stated_preset_keeps_published_column() {
        let p = TransducerParams::table_i_stated();
        assert_eq!(p.c0, 58e-9);
        assert_eq!(p.h, 7.86e6);
        assert_eq!(p.zc, 4445.0);
        assert!(rel(p.parallel_resonance(), 240_625.0) < 1e-9);
        // the stated coupling is far weaker than the tabulated K_t
        assert!(rel(p.effective_coupling(), 0.0409) < 0.01);
    }

    #[test]
    fn air_line_constants() {
        let air = AirChannelParams::table_i(154e-6);
        assert!(rel(air.r_per_m, 0.1232) < 5e-3);
        assert!(rel(air.r_per_m, 124e-3) < 0.01);
        assert!(rel(air.l_per_m, 184.8e-6) < 1e-9);
        assert!(rel(air.l_per_m, 184e-6) < 0.01);
        assert!(rel(air.c_per_m, 46.0e-3) < 0.01);
        let lossless = AirChannelParams::derive(
            AirBase {
                attenuation: 0.0,
                ..AirBase::TABLE_I
            },
            154e-6,
        )
        .unwrap();
        assert_eq!(lossless.r_per_m, 0.0);
        assert!(rel(air.delay(), 2e-3 / 343.0) < 1e-12);
    }

    #[test]
    fn consistency_flags_capacitance_only_where_expected() {
        let p = TransducerParams::table_i_stated();
        let air = AirChannelParams::table_i(p.area);
        let report = consistency_report(&p, &air, &StatedTable::TABLE_I);
        let row = |f: &str| report.iter().find(|r| r.field == f).unwrap().clone();
        let c0 = row("C0");
        assert!(c0.flagged);
        assert!(rel(c0.formula, 0.578e-9) < 0.01);
        assert!((c0.stated / c0.formula - 100.0).abs() < 1.0);
        assert!(!row("Zc").flagged);
        assert!(!row("N").flagged);
        assert!(!row("A").flagged);
        assert!(!row("R_a").flagged);
        assert!(!row("L_a").flagged);
        assert!(!row("C_a").flagged);
        assert!(row("h").flagged);
        assert!(row("Kt").flagged);
    }

    #[test]
    fn invalid_base_rejected() {
        let mut base = TransducerBase::TABLE_I;
        base.coupling = 1.5;
        assert!(TransducerParams::derive(base).is_err());
        base.coupling = 0.5;
        base.thickness = 0.0;
        assert!(TransducerParams::derive(base).is_err());
        assert!(LoadConfig::new(-1e-9).is_err());
    }

    #[test]
    fn preset_text_round() {
        let reg = PresetRegistry::builtin();
        let text = "# thinner disc\nname = thin\nT = 4m\nd = 3m\n";
        let parsed = parse_preset(text, "file", &reg).unwrap();
        assert_eq!(parsed.name, "thin");
        assert!(rel(parsed.transducer.tau_c, 4e-3 / 3850.0) < 1e-12);
        assert_eq!(parsed.air.gap, 3e-3);
        let stated = parse_preset("base = tableI-stated\nC0 = 29n\n", "x", &reg).unwrap();
        assert_eq!(stated.transducer.c0, 29e-9);
        assert!(rel(stated.transducer.h, 0.4483 / 29e-9) < 1e-12);
        assert!(parse_preset("bogus = 1\n", "x", &reg).is_err());
        assert!(parse_preset("T 4m\n", "x", &reg).is_err());
    }
}
