use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use echolab::circuit::CircuitError;
use echolab::dsp::{
    bode_measure, chirp_measure, estimate_spectrum_peak, pll_calibrate, pll_track,
    ringdown_spectrum, spectrum, DspError, MeasureSettings, Span, Spectrum, Window,
};
use echolab::experiments::{
    linspace, measure as measure_method, run_backscatter, sweep_load, ChannelConfig,
    ExperimentError, Method, ShiftRow, ShiftTable,
};
use echolab::netlist::{elaborate, parse, Body, NetlistError};
use echolab::piezo::{AirChannelParams, PresetRegistry};
use echolab::transient::{run_transient, write_traces_csv, TransientConfig, TransientError};
use echolab::units::{format_eng, parse_value};
use echolab::{Trace, Waveform};

use crate::manifest::RunManifest;
use crate::svg::{self, Plot, Series};
use crate::{CliError, Common, MeasureMethod};

enum FileBody {
    Csv(String),
    Svg(Plot),
}

/// Files of one command, written together once everything has succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, FileBody)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(
        &mut self,
        common: &Common,
        stem: &str,
        csv: impl FnOnce() -> String,
        plot: impl FnOnce() -> Plot,
    ) {
        if common.format.csv() {
            self.files
                .push((format!("{stem}.csv"), FileBody::Csv(csv())));
        }
        if common.format.svg() {
            self.files
                .push((format!("{stem}.svg"), FileBody::Svg(plot())));
        }
    }

    fn write(self, mut manifest: RunManifest) -> Result<(), CliError> {
        let paths: Vec<PathBuf> = self.files.iter().map(|(n, _)| self.dir.join(n)).collect();
        manifest.outputs = paths.iter().map(|p| p.display().to_string()).collect();
        fs::create_dir_all(&self.dir)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", self.dir.display())))?;
        for ((_, body), path) in self.files.into_iter().zip(&paths) {
            let text = match body {
                FileBody::Csv(csv) => manifest.csv_header() + &csv,
                FileBody::Svg(plot) => svg::render(&plot, &manifest.lines()),
            };
            fs::write(path, text)
                .map_err(|e| CliError::Compute(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

fn circuit_is_input(e: &CircuitError) -> bool {
    matches!(
        e,
        CircuitError::Invalid(_)
            | CircuitError::UnknownProbe(_)
            | CircuitError::InvalidParams(_)
            | CircuitError::BadFrequency(_)
    )
}

fn transient_error(e: TransientError) -> CliError {
    let is_input = match &e {
        TransientError::Circuit(c) => circuit_is_input(c),
        TransientError::StepTooCoarse { .. } | TransientError::BadConfig(_) => true,
        _ => false,
    };
    if is_input {
        CliError::Input(e.to_string())
    } else {
        CliError::Compute(e.to_string())
    }
}

fn experiment_error(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Transient(t) => transient_error(t),
        ExperimentError::Circuit(ref c) if circuit_is_input(c) => CliError::Input(e.to_string()),
        ExperimentError::Params(_)
        | ExperimentError::MissingReference
        | ExperimentError::Dsp(DspError::NyquistViolation { .. } | DspError::BadArgument(_)) => {
            CliError::Input(e.to_string())
        }
        other => CliError::Compute(other.to_string()),
    }
}

/// Built-in presets plus every `*.preset` file in the ECHOLAB_PRESET_PATH
/// directories.
fn registry() -> Result<PresetRegistry, CliError> {
    let mut reg = PresetRegistry::builtin();
    if let Some(paths) = std::env::var_os("ECHOLAB_PRESET_PATH") {
        for dir in std::env::split_paths(&paths).filter(|p| !p.as_os_str().is_empty()) {
            reg.load_dir(&dir).map_err(|e| input(e.to_string()))?;
        }
    }
    Ok(reg)
}

/// Resolves `--preset` against the registry, loading it first when it names
/// a file. Returns the preset name and the file bytes for the manifest hash.
fn resolve_preset(
    common: &Common,
    reg: &mut PresetRegistry,
) -> Result<(String, Vec<u8>), CliError> {
    let path = Path::new(&common.preset);
    let is_file = common.preset.ends_with(".preset") || path.components().count() > 1;
    if is_file {
        let bytes = fs::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let name = reg.load_file(path).map_err(|e| input(e.to_string()))?;
        Ok((name, bytes))
    } else {
        reg.transducer(&common.preset)
            .map_err(|e| input(e.to_string()))?;
        Ok((common.preset.clone(), Vec::new()))
    }
}

/// Channel from the preset, then the command-line overrides on top.
fn channel(common: &Common) -> Result<(ChannelConfig, String, Vec<u8>), CliError> {
    let mut reg = registry()?;
    let (name, bytes) = resolve_preset(common, &mut reg)?;
    let params = reg.transducer(&name).map_err(|e| input(e.to_string()))?;
    let air_base = reg.air(&name).map_err(|e| input(e.to_string()))?;
    let air = AirChannelParams::derive(air_base, params.area).map_err(|e| input(e.to_string()))?;
    let mut cfg = ChannelConfig::new(params, air);
    if let Some(cl) = common.cl {
        cfg = cfg.with_load(cl);
    }
    if let Some(n) = common.segments {
        cfg = cfg.with_segments(n);
    }
    cfg.check().map_err(|e| input(e.to_string()))?;
    Ok((cfg, name, bytes))
}

fn parse_span(text: &str) -> Result<Span, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [a, b] = parts[..] else {
        return Err(input(format!("--span expects lo,hi, got {text:?}")));
    };
    let a = parse_value(a).map_err(|e| input(format!("--span: {e}")))?;
    let b = parse_value(b).map_err(|e| input(format!("--span: {e}")))?;
    if !(a > 0.0 && b > a) {
        return Err(input(format!("--span needs 0 < lo < hi, got {a}, {b}")));
    }
    Ok(if b < 100.0 {
        Span::Relative(a, b)
    } else {
        Span::Absolute(a, b)
    })
}

fn common_overrides(common: &Common) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(v) = common.cl {
        out.push(format!("cl={v}"));
    }
    if let Some(v) = &common.span {
        out.push(format!("span={v}"));
    }
    if let Some(v) = common.dt {
        out.push(format!("dt={v}"));
    }
    if let Some(v) = common.segments {
        out.push(format!("segments={v}"));
    }
    out.push(format!("seed={}", common.seed));
    out
}

fn settings(common: &Common) -> MeasureSettings {
    MeasureSettings {
        dt: common.dt,
        ..MeasureSettings::default()
    }
}

fn trace_plot(title: &str, traces: &[Trace]) -> Plot {
    Plot {
        title: title.to_string(),
        x_label: "time (us)".into(),
        y_label: "value".into(),
        series: traces
            .iter()
            .map(|t| Series {
                label: t.label.clone(),
                points: (0..t.len())
                    .map(|k| (t.time(k) * 1e6, t.samples[k]))
                    .collect(),
            })
            .collect(),
    }
}

fn traces_csv(traces: &[Trace]) -> String {
    let mut buf = Vec::new();
    write_traces_csv(&mut buf, traces).expect("writing to memory");
    String::from_utf8(buf).expect("ascii csv")
}

/// `path:line:col: message`, the offending line and a caret under the span.
fn netlist_message(path: &Path, text: &str, e: &NetlistError) -> String {
    let mut msg = format!("{}:{}: {}", path.display(), e.span, e.kind);
    if let Some(line) = text.lines().nth(e.span.line.saturating_sub(1)) {
        let pad = " ".repeat(e.span.column.saturating_sub(1));
        msg.push_str(&format!(
            "\n  {line}\n  {pad}{}",
            "^".repeat(e.span.len.max(1))
        ));
    }
    msg
}

pub fn tran(
    common: &Common,
    netlist: Option<&Path>,
    probes: &[String],
    stop: f64,
) -> Result<u8, CliError> {
    let mut overrides = common_overrides(common);
    overrides.extend(probes.iter().map(|p| format!("probe={p}")));
    let mut outputs = Outputs::new(&common.out_dir);

    let Some(path) = netlist else {
        let (cfg, name, bytes) = channel(common)?;
        overrides.push(format!("stop={stop}"));
        let s = settings(common);
        let f = cfg.nominal_fp();
        let burst = Waveform::sine_burst(s.amplitude, f, s.burst_cycles);
        let dt = s.dt_for(&cfg);
        let bs = run_backscatter(&cfg, burst, stop, dt).map_err(experiment_error)?;
        let traces = vec![bs.tx, bs.received];
        let band = Span::Relative(0.9, 1.1).resolve(f);
        let n = (bs.echo.len() * s.fft_oversample).next_power_of_two();
        match estimate_spectrum_peak(&spectrum(&bs.echo, Window::Hann, n, false), band) {
            Ok(p) => println!("echo peak = {:.3} Hz", p.f_peak),
            Err(e) => println!("echo peak: {e}"),
        }
        let manifest = RunManifest::new(
            "tran",
            vec![name],
            overrides,
            &[&bytes, format!("{cfg:?}").as_bytes()],
        );
        outputs.add(
            common,
            "tran",
            || traces_csv(&traces),
            || trace_plot("Channel transient", &traces),
        );
        outputs.write(manifest)?;
        return Ok(0);
    };

    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let mut reg = registry()?;
    let mut preset_bytes = Vec::new();
    if common.preset.ends_with(".preset") {
        preset_bytes = resolve_preset(common, &mut reg)?.1;
    }
    let doc = parse(&text).map_err(|e| input(netlist_message(path, &text, &e)))?;
    let circuit = elaborate(&doc, &reg).map_err(|e| input(netlist_message(path, &text, &e)))?;
    let analyses = doc
        .analyses()
        .map_err(|e| input(netlist_message(path, &text, &e)))?;
    let (step, duration) = analyses
        .tran
        .ok_or_else(|| input(format!("{}: no .TRAN directive", path.display())))?;
    let probes: Vec<String> = if probes.is_empty() {
        circuit.node_names()[1..]
            .iter()
            .filter(|n| !n.contains('.'))
            .map(|n| format!("V({n})"))
            .collect()
    } else {
        probes.to_vec()
    };
    let cfg = TransientConfig {
        dt: common.dt.unwrap_or(step),
        duration,
        probes,
    };
    let traces = run_transient(&circuit, &cfg).map_err(transient_error)?;
    overrides.push(format!("netlist={}", path.display()));
    let mut presets: Vec<String> = doc
        .elements
        .iter()
        .filter_map(|e| match &e.body {
            Body::Macro { preset } => Some(preset.clone()),
            _ => None,
        })
        .collect();
    presets.sort();
    presets.dedup();
    let manifest = RunManifest::new(
        "tran",
        presets,
        overrides,
        &[text.as_bytes(), &preset_bytes],
    );
    outputs.add(
        common,
        "tran",
        || traces_csv(&traces),
        || trace_plot(&path.display().to_string(), &traces),
    );
    outputs.write(manifest)?;
    println!("{} samples x {} probes", traces[0].len(), traces.len());
    Ok(0)
}

fn spectrum_csv(spec: &Spectrum, band: (f64, f64)) -> (String, Vec<(f64, f64)>) {
    let rows: Vec<(f64, f64)> = spec
        .freqs
        .iter()
        .zip(&spec.magnitude)
        .filter(|(f, _)| **f >= band.0 && **f <= band.1)
        .map(|(f, m)| (*f, *m))
        .collect();
    let mut csv = String::from("f_hz,mag\n");
    for (f, m) in &rows {
        csv.push_str(&format!("{f},{m}\n"));
    }
    (csv, rows)
}

fn magnitude_plot(title: &str, label: &str, rows: &[(f64, f64)]) -> Plot {
    Plot {
        title: title.to_string(),
        x_label: "frequency (kHz)".into(),
        y_label: "magnitude".into(),
        series: vec![Series {
            label: label.to_string(),
            points: rows.iter().map(|(f, m)| (f * 1e-3, *m)).collect(),
        }],
    }
}

pub fn measure(
    common: &Common,
    method: MeasureMethod,
    points: usize,
    iterations: usize,
) -> Result<u8, CliError> {
    let (cfg, name, bytes) = channel(common)?;
    let mut s = settings(common);
    let span = common.span.as_deref().map(parse_span).transpose()?;
    let f0 = cfg.nominal_fp();
    let c_load = cfg.load.c_load;
    let mut overrides = common_overrides(common);
    let mut outputs = Outputs::new(&common.out_dir);
    let tag = match method {
        MeasureMethod::Ringdown => "ringdown",
        MeasureMethod::Chirp => "chirp",
        MeasureMethod::Bode => "bode",
        MeasureMethod::Pll => "pll",
    };
    let stem = format!("measure_{tag}");
    let title = format!("{tag}, C_L = {}F", format_eng(c_load));

    let f_p = match method {
        MeasureMethod::Ringdown => {
            if let Some(sp) = span {
                s.band = sp;
            }
            let (spec, est) = ringdown_spectrum(&cfg, f0, &s).map_err(experiment_error)?;
            let view = span.unwrap_or(Span::Relative(0.9, 1.1)).resolve(f0);
            let (csv, rows) = spectrum_csv(&spec, view);
            outputs.add(
                common,
                &stem,
                || csv,
                || magnitude_plot(&title, "echo tail", &rows),
            );
            est.f_p
        }
        MeasureMethod::Chirp => {
            if let Some(sp) = span {
                s.chirp_span = sp;
            }
            let (lo, hi) = s.chirp_span.resolve(f0);
            let (spec, est) =
                chirp_measure(&cfg, lo, hi, s.chirp_duration, &s).map_err(experiment_error)?;
            let (csv, rows) = spectrum_csv(&spec, (lo, hi));
            outputs.add(
                common,
                &stem,
                || csv,
                || magnitude_plot(&title, "echo tail", &rows),
            );
            est.f_p
        }
        MeasureMethod::Bode => {
            if points < 1 {
                return Err(input("--points must be at least 1"));
            }
            overrides.push(format!("points={points}"));
            let (lo, hi) = span.unwrap_or(Span::Relative(0.8, 1.1)).resolve(f0);
            let resp =
                bode_measure(&cfg, &linspace(lo, hi, points), &s).map_err(experiment_error)?;
            let est = measure_method(&cfg, Method::Bode, f0, &s).map_err(experiment_error)?;
            let mut buf = Vec::new();
            resp.write_csv(&mut buf).expect("writing to memory");
            let csv = String::from_utf8(buf).expect("ascii csv");
            let rows: Vec<(f64, f64)> = resp.freqs.iter().copied().zip(resp.magnitudes()).collect();
            outputs.add(
                common,
                &stem,
                || csv,
                || magnitude_plot(&title, "|V(ei)/Vs|", &rows),
            );
            est.f_p
        }
        MeasureMethod::Pll => {
            if iterations < 1 {
                return Err(input("--iterations must be at least 1"));
            }
            overrides.push(format!("iterations={iterations}"));
            if let Some(sp) = span {
                s.pll_band = sp;
            }
            let state = pll_calibrate(&cfg, &s).map_err(experiment_error)?;
            let done =
                pll_track(&cfg, state, &vec![c_load; iterations], &s).map_err(experiment_error)?;
            let mut csv = String::from("iteration,c_load_f,frequency_hz,phase_error_rad\n");
            for e in &done.log {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    e.iteration, e.c_load, e.frequency, e.phase_error
                ));
            }
            let points: Vec<(f64, f64)> = done
                .log
                .iter()
                .map(|e| (e.iteration as f64, e.frequency))
                .collect();
            outputs.add(
                common,
                &stem,
                || csv,
                || Plot {
                    title: title.clone(),
                    x_label: "iteration".into(),
                    y_label: "frequency (Hz)".into(),
                    series: vec![Series {
                        label: "oscillator".into(),
                        points,
                    }],
                },
            );
            done.frequency
        }
    };
    let manifest = RunManifest::new(
        &format!("measure {tag}"),
        vec![name],
        overrides,
        &[&bytes, format!("{cfg:?}").as_bytes()],
    );
    outputs.write(manifest)?;
    println!("f_p = {f_p:.3} Hz ({tag}, C_L = {}F)", format_eng(c_load));
    Ok(0)
}

fn merge(loads: &[f64], methods: &[Method], columns: Vec<ShiftTable>) -> ShiftTable {
    let mut rows: Vec<ShiftRow> = loads
        .iter()
        .map(|&c_load| ShiftRow {
            c_load,
            f_p: Vec::new(),
            f_s: Vec::new(),
            errors: Vec::new(),
        })
        .collect();
    for col in columns {
        for (row, r) in rows.iter_mut().zip(col.rows) {
            row.f_p.extend(r.f_p);
            row.f_s.extend(r.f_s);
            row.errors.extend(r.errors);
        }
    }
    ShiftTable {
        methods: methods.to_vec(),
        rows,
    }
}

pub fn sweep(common: &Common, loads: &str, methods: &str) -> Result<u8, CliError> {
    let loads: Vec<f64> = loads
        .split(',')
        .map(|t| parse_value(t.trim()).map_err(|e| input(format!("--loads: {e}"))))
        .collect::<Result<_, _>>()?;
    let methods: Vec<Method> = methods
        .split(',')
        .map(|t| {
            Method::parse(t.trim()).ok_or_else(|| input(format!("--methods: unknown method {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    if methods.is_empty() || loads.is_empty() {
        return Err(input("need at least one load and one method"));
    }
    if !loads.contains(&0.0) {
        return Err(experiment_error(ExperimentError::MissingReference));
    }
    let (cfg, name, bytes) = channel(common)?;
    let mut s = settings(common);
    if let Some(sp) = common.span.as_deref().map(parse_span).transpose()? {
        s.chirp_span = sp;
    }

    // Columns are independent, so each method runs on its own thread.
    let columns: Vec<Result<ShiftTable, ExperimentError>> = thread::scope(|scope| {
        let handles: Vec<_> = methods
            .iter()
            .map(|&m| {
                let (cfg, loads, s) = (&cfg, &loads, &s);
                scope.spawn(move || sweep_load(cfg, loads, &[m], s))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let columns = columns
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(experiment_error)?;
    let table = merge(&loads, &methods, columns);

    let mut ok = 0;
    for row in &table.rows {
        for (m, e) in methods.iter().zip(&row.errors) {
            match e {
                Some(e) => eprintln!("C_L = {}F, {m}: {e}", format_eng(row.c_load)),
                None => ok += 1,
            }
        }
    }
    if ok == 0 {
        return Err(CliError::Compute("every sweep cell failed".into()));
    }

    let mut overrides = common_overrides(common);
    overrides.push(format!(
        "loads={}",
        loads
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    overrides.push(format!(
        "methods={}",
        methods
            .iter()
            .map(|m| m.tag())
            .collect::<Vec<_>>()
            .join(",")
    ));
    let manifest = RunManifest::new(
        "sweep",
        vec![name],
        overrides,
        &[&bytes, format!("{cfg:?}").as_bytes()],
    );
    let mut buf = Vec::new();
    table.write_csv(&mut buf).expect("writing to memory");
    let csv = String::from_utf8(buf).expect("ascii csv");
    print!("{csv}");
    let plot = Plot {
        title: "Parallel resonance shift vs load".into(),
        x_label: "C_L (nF)".into(),
        y_label: "shift (Hz)".into(),
        series: methods
            .iter()
            .map(|&m| Series {
                label: m.tag().to_string(),
                points: (0..table.rows.len())
                    .map(|i| {
                        (
                            table.rows[i].c_load * 1e9,
                            table.shift(i, m).unwrap_or(f64::NAN),
                        )
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut outputs = Outputs::new(&common.out_dir);
    outputs.add(common, "sweep", || csv, || plot);
    outputs.write(manifest)?;
    Ok(0)
}
