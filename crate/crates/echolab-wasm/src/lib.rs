//! Browser entry points. Each function also runs natively, which is how the
//! tests exercise them.

use echolab::experiments::{ac_resonance, ac_sweep, linspace, AcQuantity, ChannelConfig};
use echolab::netlist::{elaborate, parse, serialize};
use echolab::piezo::{AirChannelParams, PresetRegistry};
use wasm_bindgen::prelude::*;

/// Final grid spacing of the resonance search, hertz.
const RESONANCE_TOLERANCE: f64 = 0.01;

fn channel(preset: &str, c_load: f64) -> Result<ChannelConfig, String> {
    let reg = PresetRegistry::builtin();
    let params = reg.transducer(preset).map_err(|e| e.to_string())?;
    let air_base = reg.air(preset).map_err(|e| e.to_string())?;
    let air = AirChannelParams::derive(air_base, params.area).map_err(|e| e.to_string())?;
    let cfg = ChannelConfig::new(params, air).with_load(c_load);
    cfg.check().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Parses and elaborates `text`. Returns the normalized netlist followed by
/// a `* elements: N, nodes: M` summary, or an error of the form
/// `line:column: message`.
pub fn check_netlist_text(text: &str) -> Result<String, String> {
    let doc = parse(text).map_err(|e| format!("{}: {}", e.span, e.kind))?;
    let circuit = elaborate(&doc, &PresetRegistry::builtin())
        .map_err(|e| format!("{}: {}", e.span, e.kind))?;
    Ok(format!(
        "{}* elements: {}, nodes: {}\n",
        serialize(&doc),
        circuit.flattened().elements().len(),
        circuit.node_count() - 1
    ))
}

/// Impedance of the loaded sensor port on `points` frequencies between
/// `f_lo` and `f_hi`, flattened as `[f, |Z|, arg Z, f, |Z|, arg Z, ...]`.
pub fn usn_impedance_values(
    preset: &str,
    c_load: f64,
    f_lo: f64,
    f_hi: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    if !(f_lo > 0.0 && f_hi > f_lo) || points == 0 || points > 100_000 {
        return Err(format!(
            "need 0 < f_lo < f_hi and 1..=100000 points, got {f_lo}, {f_hi}, {points}"
        ));
    }
    let cfg = channel(preset, c_load)?;
    let resp = ac_sweep(
        &cfg,
        AcQuantity::UsnImpedance,
        &linspace(f_lo, f_hi, points),
    )
    .map_err(|e| e.to_string())?;
    Ok(resp
        .freqs
        .iter()
        .zip(&resp.values)
        .flat_map(|(f, z)| [*f, z.norm(), z.arg()])
        .collect())
}

/// `[f_s, f_p, f_p - f_p(unloaded)]` in hertz from the AC reference search.
pub fn load_shift_values(preset: &str, c_load: f64) -> Result<Vec<f64>, String> {
    if !(c_load.is_finite() && c_load >= 0.0) {
        return Err(format!(
            "load must be finite and non-negative, got {c_load}"
        ));
    }
    let loaded =
        ac_resonance(&channel(preset, c_load)?, RESONANCE_TOLERANCE).map_err(|e| e.to_string())?;
    let base = if c_load == 0.0 {
        loaded.f_p
    } else {
        ac_resonance(&channel(preset, 0.0)?, RESONANCE_TOLERANCE)
            .map_err(|e| e.to_string())?
            .f_p
    };
    Ok(vec![
        loaded.f_s.unwrap_or(f64::NAN),
        loaded.f_p,
        loaded.f_p - base,
    ])
}

/// Names of the built-in presets.
#[wasm_bindgen]
pub fn presets() -> Vec<String> {
    PresetRegistry::builtin()
        .names()
        .map(String::from)
        .collect()
}

#[wasm_bindgen]
pub fn check_netlist(text: &str) -> Result<String, JsError> {
    check_netlist_text(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn usn_impedance(
    preset: &str,
    c_load: f64,
    f_lo: f64,
    f_hi: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    usn_impedance_values(preset, c_load, f_lo, f_hi, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn load_shift(preset: &str, c_load: f64) -> Result<Vec<f64>, JsError> {
    load_shift_values(preset, c_load).map_err(|e| JsError::new(&e))
}
