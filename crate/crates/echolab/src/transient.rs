//! Fixed-step time-domain simulation.
//!
//! Reactive elements use trapezoidal companion models; the very first step
//! is a backward-Euler step so that a source discontinuity at `t = 0` does
//! not leave a first-order error behind. Lossless lines are advanced by the
//! method of characteristics: each port sees a resistance `Z` in series with
//! the wave `v + Z i` that left the opposite port one delay earlier. Delays
//! that are a whole number of steps are read straight from the history
//! buffer, other delays interpolate linearly between the two neighbouring
//! samples.
//!
//! The MNA matrix is constant after the first step, so it is factored once
//! (after a reverse Cuthill-McKee reordering) and only the right-hand side
//! changes per step.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;

use thiserror::Error;

use crate::circuit::{
    resolve_probe, stamp_static, validate, Circuit, CircuitError, Element, ElementKind, MnaLayout,
    NodeId, Probe, Stamper, Waveform, GROUND,
};
use crate::linalg::{reverse_cuthill_mckee, CompressedLu, DenseMatrix, LuFactors};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransientError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("time step {dt:e} s exceeds the line-delay limit {limit:e} s (delay/50)")]
    StepTooCoarse { dt: f64, limit: f64 },
    #[error("invalid transient configuration: {0}")]
    BadConfig(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("expected {expected} external samples, got {got}")]
    ExternalArity { expected: usize, got: usize },
}

/// Step-size rule: at least this many steps per line delay.
pub const STEPS_PER_DELAY: f64 = 50.0;

/// Default step for a circuit resonating near `f_p`.
pub fn default_dt(f_p: f64) -> f64 {
    1.0 / (256.0 * f_p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientConfig {
    pub dt: f64,
    pub duration: f64,
    /// `V(node)`, `I(element)` or a bare node name.
    pub probes: Vec<String>,
}

impl TransientConfig {
    pub fn new(dt: f64, duration: f64, probes: &[&str]) -> Self {
        Self {
            dt,
            duration,
            probes: probes.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Uniformly sampled real signal. Sample `k` sits at `t0 + k / sample_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub label: String,
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub t0: f64,
}

impl Trace {
    pub fn new(label: impl Into<String>, samples: Vec<f64>, sample_rate: f64) -> Self {
        Self {
            label: label.into(),
            samples,
            sample_rate,
            t0: 0.0,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Samples with `t >= from`, keeping the absolute time origin.
    pub fn slice_from(&self, from: f64) -> Trace {
        let k = (((from - self.t0) * self.sample_rate).ceil().max(0.0) as usize).min(self.len());
        Trace {
            label: self.label.clone(),
            samples: self.samples[k..].to_vec(),
            sample_rate: self.sample_rate,
            t0: self.time(k),
        }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.sample_rate
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }
}

/// Writes traces sharing one time base as CSV with header `t,<probe>...`.
pub fn write_traces_csv<W: Write>(out: &mut W, traces: &[Trace]) -> io::Result<()> {
    let Some(first) = traces.first() else {
        return Ok(());
    };
    write!(out, "t")?;
    for t in traces {
        write!(out, ",{}", t.label)?;
    }
    writeln!(out)?;
    for k in 0..first.len() {
        write!(out, "{}", first.time(k))?;
        for t in traces {
            write!(out, ",{}", t.samples.get(k).copied().unwrap_or(f64::NAN))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct CapState {
    /// Permuted unknown slots; ground maps to the sentinel slot.
    a: usize,
    b: usize,
    c: f64,
    /// Companion conductance, `[backward Euler, trapezoidal]`.
    g: [f64; 2],
    v: f64,
    i: f64,
}

/// Inductor, possibly with a resistor folded in series, as a Norton companion.
#[derive(Debug, Clone)]
struct RlState {
    name: String,
    /// Name of the absorbed series resistor.
    resistor: Option<String>,
    a: usize,
    b: usize,
    nodes: (NodeId, NodeId),
    r: f64,
    l: f64,
    coef: [(f64, f64, f64); 2],
    /// Voltage across the whole series pair, current from `a` to `b`.
    v: f64,
    i: f64,
}

/// Companion `i_n = g v_n + kv v_{n-1} + ki i_{n-1}`, indexed by
/// `[backward Euler, trapezoidal]`.
fn rl_companion(r: f64, l: f64, dt: f64) -> [(f64, f64, f64); 2] {
    let be = 1.0 / (r + l / dt);
    let tr = 1.0 / (r + 2.0 * l / dt);
    [(be, 0.0, be * l / dt), (tr, tr, tr * (2.0 * l / dt - r))]
}

impl RlState {
    /// History current injected in parallel with the conductance.
    fn history(&self, method: usize) -> f64 {
        let (_, kv, ki) = self.coef[method];
        kv * self.v + ki * self.i
    }
}

struct FoldedRl {
    name: String,
    resistor: Option<String>,
    a: NodeId,
    b: NodeId,
    r: f64,
    l: f64,
    i0: f64,
}

/// Removes every inductor from `flat`, absorbing a resistor that shares an
/// otherwise unused node with it. The internal node disappears, so a ladder
/// section costs one unknown instead of three. Nodes in `keep` are never
/// folded away.
fn fold_inductors(flat: &Circuit, keep: &[NodeId]) -> (Circuit, Vec<FoldedRl>) {
    let elements = flat.elements();
    let mut degree = vec![0usize; flat.node_count()];
    for &n in keep {
        degree[n] = usize::MAX / 2;
    }
    for e in elements {
        for n in e.kind.terminals() {
            degree[n] += 1;
        }
        if let ElementKind::Vcvs {
            ctrl_pos, ctrl_neg, ..
        } = e.kind
        {
            degree[ctrl_pos] += 2;
            degree[ctrl_neg] += 2;
        }
    }
    let mut removed = vec![false; elements.len()];
    let mut folded = Vec::new();
    for (idx, e) in elements.iter().enumerate() {
        let ElementKind::Inductor {
            a,
            b,
            henries,
            initial_current,
        } = e.kind
        else {
            continue;
        };
        removed[idx] = true;
        let mut rl = FoldedRl {
            name: e.name.clone(),
            resistor: None,
            a,
            b,
            r: 0.0,
            l: henries,
            i0: initial_current,
        };
        for (shared, far_is_a) in [(a, true), (b, false)] {
            if shared == GROUND || degree[shared] != 2 {
                continue;
            }
            let partner = elements.iter().enumerate().find(|(j, other)| {
                !removed[*j]
                    && matches!(other.kind, ElementKind::Resistor { ohms, .. } if ohms > 0.0)
                    && other.kind.terminals().contains(&shared)
            });
            if let Some((j, other)) = partner {
                let ElementKind::Resistor { a: ra, b: rb, ohms } = other.kind else {
                    unreachable!()
                };
                let far = if ra == shared { rb } else { ra };
                if far == shared {
                    continue;
                }
                removed[j] = true;
                rl.resistor = Some(other.name.clone());
                rl.r = ohms;
                if far_is_a {
                    rl.a = far;
                } else {
                    rl.b = far;
                }
                break;
            }
        }
        folded.push(rl);
    }
    let mut out = Circuit::new();
    let map = |out: &mut Circuit, n: NodeId| out.node(flat.node_name(n));
    for (idx, e) in elements.iter().enumerate() {
        if !removed[idx] {
            let kind = e.kind.map_nodes(|n| map(&mut out, n));
            out.add(Element::new(e.name.clone(), kind));
        }
    }
    for rl in &mut folded {
        rl.a = map(&mut out, rl.a);
        rl.b = map(&mut out, rl.b);
    }
    (out, folded)
}

#[derive(Debug, Clone)]
struct LineState {
    ports: [(usize, usize); 2],
    branches: [usize; 2],
    z: f64,
    /// Delay in steps.
    delay_steps: f64,
    whole: Option<usize>,
    /// Ring buffers of outgoing waves `v + Z i`, one per port.
    history: [Vec<f64>; 2],
    /// Slot of the most recent wave.
    head: usize,
}

impl LineState {
    fn new(ports: [(usize, usize); 2], branches: [usize; 2], z: f64, delay_steps: f64) -> Self {
        let rounded = delay_steps.round();
        let whole =
            ((delay_steps - rounded).abs() < 1e-9 * delay_steps).then_some(rounded as usize);
        let len = delay_steps.ceil() as usize + 2;
        Self {
            ports,
            branches,
            z,
            delay_steps: whole.map_or(delay_steps, |d| d as f64),
            whole,
            history: [vec![0.0; len], vec![0.0; len]],
            head: 0,
        }
    }

    /// Wave emitted `back` steps before the step being computed.
    fn at(&self, port: usize, back: usize) -> f64 {
        let len = self.history[port].len();
        let k = self.head + 1 + len - back;
        self.history[port][if k >= len { k - len } else { k }]
    }

    fn incoming(&self, from_port: usize) -> f64 {
        match self.whole {
            Some(d) => self.at(from_port, d),
            None => {
                let lo = self.delay_steps.floor() as usize;
                let frac = self.delay_steps - lo as f64;
                (1.0 - frac) * self.at(from_port, lo) + frac * self.at(from_port, lo + 1)
            }
        }
    }

    fn push(&mut self, waves: [f64; 2]) {
        let len = self.history[0].len();
        self.head = if self.head + 1 == len {
            0
        } else {
            self.head + 1
        };
        self.history[0][self.head] = waves[0];
        self.history[1][self.head] = waves[1];
    }
}

#[derive(Debug, Clone)]
struct Source {
    branch: usize,
    waveform: Waveform,
}

#[derive(Debug, Clone)]
enum ProbeKind {
    Slot(usize),
    Capacitor(usize),
    Inductor(usize),
    Resistor { a: usize, b: usize, g: f64 },
}

/// Stateful transient simulation advanced one step at a time.
///
/// Internally every unknown lives at its position in the bandwidth-reducing
/// order, with one extra always-zero slot standing in for ground.
#[derive(Debug, Clone)]
pub struct Session {
    dt: f64,
    step: usize,
    trapezoidal: bool,
    size: usize,
    flat: Circuit,
    layout: MnaLayout,
    /// `slot[unknown]` is the permuted position of an MNA unknown.
    slot: Vec<usize>,
    first: CompressedLu<f64>,
    steady: CompressedLu<f64>,
    sources: Vec<Source>,
    external: Vec<usize>,
    caps: Vec<CapState>,
    inds: Vec<RlState>,
    lines: Vec<LineState>,
    probes: Vec<ProbeKind>,
    probe_names: Vec<String>,
    x: Vec<f64>,
    rhs: Vec<f64>,
    values: Vec<f64>,
    closed: bool,
}

impl Session {
    /// Validates and prepares `circuit` for stepping at `dt`.
    pub fn open(circuit: &Circuit, dt: f64, probes: &[String]) -> Result<Self, TransientError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(TransientError::BadConfig(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let diagnostics = validate(circuit);
        if !diagnostics.is_empty() {
            return Err(CircuitError::Invalid(diagnostics).into());
        }
        let flat = circuit.flattened();
        let probed: Vec<NodeId> = probes
            .iter()
            .filter_map(|p| {
                let t = p.trim();
                let inner = t
                    .strip_prefix("V(")
                    .or_else(|| t.strip_prefix("v("))
                    .and_then(|r| r.strip_suffix(')'))
                    .unwrap_or(t);
                flat.node_id(inner.trim())
            })
            .collect();
        let (flat, folded) = fold_inductors(&flat, &probed);
        if let Some(tau) = flat.min_line_delay() {
            let limit = tau / STEPS_PER_DELAY;
            if dt > limit * (1.0 + 1e-9) {
                return Err(TransientError::StepTooCoarse { dt, limit });
            }
        }
        let layout = MnaLayout::new(&flat);
        let size = layout.size();

        let matrix = |trapezoidal: bool| -> Result<DenseMatrix<f64>, CircuitError> {
            let scale = if trapezoidal { 2.0 } else { 1.0 };
            let mut m = DenseMatrix::zeros(size);
            let mut st = Stamper { matrix: &mut m };
            stamp_static(&flat, &layout, &mut st)?;
            for (idx, e) in flat.elements().iter().enumerate() {
                match e.kind {
                    ElementKind::Capacitor { a, b, farads, .. } => {
                        st.admittance(a, b, scale * farads / dt);
                    }
                    ElementKind::LosslessLine {
                        p1,
                        n1,
                        p2,
                        n2,
                        impedance,
                        ..
                    } => {
                        let k = layout.branch_of(idx).expect("line has branches");
                        for (j, (a, b)) in [(k, (p1, n1)), (k + 1, (p2, n2))] {
                            st.incidence(j, a, b);
                            st.voltage_term(j, a, b, 1.0);
                            st.entry(j, j, -impedance);
                        }
                    }
                    _ => {}
                }
            }
            for rl in &folded {
                st.admittance(rl.a, rl.b, 1.0 / (rl.r + scale * rl.l / dt));
            }
            Ok(m)
        };
        let m_first = matrix(false)?;
        let order = reverse_cuthill_mckee(&m_first.adjacency());
        let mut slot = vec![0; size];
        for (new, &old) in order.iter().enumerate() {
            slot[old] = new;
        }
        let factor = |m: &DenseMatrix<f64>| -> Result<CompressedLu<f64>, CircuitError> {
            Ok(LuFactors::factor(&m.permuted(&order))?.compress())
        };
        let first = factor(&m_first)?;
        let steady = factor(&matrix(true)?)?;

        let node_slot = |n: NodeId| MnaLayout::node_unknown(n).map_or(size, |k| slot[k]);
        let mut sources = Vec::new();
        let mut external = Vec::new();
        let mut caps = Vec::new();
        let inds: Vec<RlState> = folded
            .into_iter()
            .map(|rl| RlState {
                name: rl.name,
                resistor: rl.resistor,
                a: node_slot(rl.a),
                b: node_slot(rl.b),
                nodes: (rl.a, rl.b),
                r: rl.r,
                l: rl.l,
                coef: rl_companion(rl.r, rl.l, dt),
                v: 0.0,
                i: rl.i0,
            })
            .collect();
        let mut lines = Vec::new();
        for (idx, e) in flat.elements().iter().enumerate() {
            let branch = layout.branch_of(idx).map(|k| slot[k]);
            match &e.kind {
                ElementKind::VoltageSource { waveform, .. } => {
                    if matches!(waveform, Waveform::External) {
                        external.push(sources.len());
                    }
                    sources.push(Source {
                        branch: branch.expect("source has a branch"),
                        waveform: waveform.clone(),
                    });
                }
                ElementKind::Capacitor {
                    a,
                    b,
                    farads,
                    initial_voltage,
                } => caps.push(CapState {
                    a: node_slot(*a),
                    b: node_slot(*b),
                    c: *farads,
                    g: [farads / dt, 2.0 * farads / dt],
                    v: *initial_voltage,
                    i: 0.0,
                }),
                ElementKind::LosslessLine {
                    p1,
                    n1,
                    p2,
                    n2,
                    impedance,
                    delay,
                } => {
                    let k = layout.branch_of(idx).expect("line has branches");
                    lines.push(LineState::new(
                        [
                            (node_slot(*p1), node_slot(*n1)),
                            (node_slot(*p2), node_slot(*n2)),
                        ],
                        [slot[k], slot[k + 1]],
                        *impedance,
                        delay / dt,
                    ));
                }
                _ => {}
            }
        }

        let mut resolved = Vec::with_capacity(probes.len());
        for name in probes {
            let t = name.trim();
            let current_of = (t.len() > 3 && t[..2].eq_ignore_ascii_case("I(") && t.ends_with(')'))
                .then(|| t[2..t.len() - 1].trim());
            if let Some(k) = current_of.and_then(|target| {
                inds.iter().position(|rl| {
                    rl.name.eq_ignore_ascii_case(target)
                        || rl
                            .resistor
                            .as_deref()
                            .is_some_and(|r| r.eq_ignore_ascii_case(target))
                })
            }) {
                resolved.push(ProbeKind::Inductor(k));
                continue;
            }
            let kind = match resolve_probe(&layout, &flat, name)? {
                Probe::Voltage(n) => ProbeKind::Slot(node_slot(n)),
                Probe::Current { element } => match &flat.elements()[element].kind {
                    ElementKind::Capacitor { .. } => {
                        let k = flat.elements()[..element]
                            .iter()
                            .filter(|e| matches!(e.kind, ElementKind::Capacitor { .. }))
                            .count();
                        ProbeKind::Capacitor(k)
                    }
                    ElementKind::Resistor { a, b, ohms } if *ohms > 0.0 => ProbeKind::Resistor {
                        a: node_slot(*a),
                        b: node_slot(*b),
                        g: 1.0 / ohms,
                    },
                    _ => ProbeKind::Slot(slot[layout.branch_of(element).expect("branch element")]),
                },
            };
            resolved.push(kind);
        }

        let mut x = vec![0.0; size + 1];
        for c in &caps {
            // a grounded capacitor's initial voltage shows at its node
            if c.b == size && c.a != size {
                x[c.a] = c.v;
            }
        }
        let mut session = Self {
            dt,
            step: 0,
            trapezoidal: false,
            size,
            flat,
            layout,
            slot,
            first,
            steady,
            sources,
            external,
            caps,
            inds,
            lines,
            probes: resolved,
            probe_names: probes.to_vec(),
            x,
            rhs: vec![0.0; size + 1],
            values: vec![0.0; probes.len()],
            closed: false,
        };
        session.sample();
        Ok(session)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of the most recent solution.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn probe_names(&self) -> &[String] {
        &self.probe_names
    }

    pub fn external_count(&self) -> usize {
        self.external.len()
    }

    /// Probe values of the most recent solution.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Unknown count of the assembled system.
    pub fn system_size(&self) -> usize {
        self.size
    }

    pub fn factor_nnz(&self) -> usize {
        self.steady.nnz()
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Replaces the zero initial state by the discrete periodic steady state
    /// for sinusoidal drive at `frequency`: every sine source with that
    /// frequency (and zero start time) contributes its amplitude, every other
    /// source is treated as zero. The state is the exact fixed point of the
    /// trapezoidal / characteristics update, so stepping from it shows no
    /// start-up transient. Must be called before the first step.
    pub fn init_periodic(&mut self, frequency: f64) -> Result<(), TransientError> {
        if self.step != 0 {
            return Err(TransientError::BadConfig(
                "periodic initialisation must precede the first step".into(),
            ));
        }
        let dt = self.dt;
        let z = Complex64::from_polar(1.0, 2.0 * PI * frequency * dt);
        let warp = (z - 1.0) / (z + 1.0);
        let n = self.size;
        let mut m = DenseMatrix::<Complex64>::zeros(n);
        let mut rhs = vec![Complex64::new(0.0, 0.0); n];
        let layout = &self.layout;
        {
            let mut st = Stamper { matrix: &mut m };
            stamp_static(&self.flat, layout, &mut st)?;
            for (idx, e) in self.flat.elements().iter().enumerate() {
                match &e.kind {
                    ElementKind::Capacitor { a, b, farads, .. } => {
                        st.admittance(*a, *b, warp * (2.0 * farads / dt));
                    }
                    ElementKind::VoltageSource { waveform, .. } => {
                        let k = layout.branch_of(idx).expect("source has a branch");
                        if let Waveform::SineBurst {
                            amplitude,
                            frequency: f,
                            cycles: None,
                            start,
                        } = *waveform
                        {
                            if f == frequency && start == 0.0 {
                                rhs[k] = Complex64::new(amplitude, 0.0);
                            }
                        }
                    }
                    ElementKind::LosslessLine {
                        p1,
                        n1,
                        p2,
                        n2,
                        impedance,
                        delay,
                    } => {
                        let k = layout.branch_of(idx).expect("line has branches");
                        let d = delay / dt;
                        let line = LineState::new([(0, 0); 2], [0, 0], *impedance, d);
                        let lag = match line.whole {
                            Some(w) => z.powi(-(w as i32)),
                            None => {
                                let lo = line.delay_steps.floor();
                                let frac = line.delay_steps - lo;
                                z.powi(-(lo as i32)) * ((1.0 - frac) + frac / z)
                            }
                        };
                        // v_p - Z i_p = lag (v_q + Z i_q)
                        for (row, (a, b), other, (oa, ob)) in [
                            (k, (*p1, *n1), k + 1, (*p2, *n2)),
                            (k + 1, (*p2, *n2), k, (*p1, *n1)),
                        ] {
                            st.incidence(row, a, b);
                            st.voltage_term(row, a, b, Complex64::new(1.0, 0.0));
                            st.entry(row, row, Complex64::new(-impedance, 0.0));
                            st.voltage_term(row, oa, ob, -lag);
                            st.entry(row, other, -lag * *impedance);
                        }
                    }
                    _ => {}
                }
            }
        }
        let rl_admittance = |l: &RlState| (warp * (2.0 * l.l / dt) + l.r).inv();
        {
            let mut st = Stamper { matrix: &mut m };
            for l in &self.inds {
                st.admittance(l.nodes.0, l.nodes.1, rl_admittance(l));
            }
        }
        let phasor = LuFactors::factor(&m)
            .and_then(|lu| lu.solve(&rhs))
            .map_err(CircuitError::from)?;
        let slot = &self.slot;
        let mut xp = vec![Complex64::new(0.0, 0.0); n + 1];
        for (k, v) in phasor.iter().enumerate() {
            xp[slot[k]] = *v;
        }
        let node = |s: usize| xp[s];
        for c in &mut self.caps {
            let v = node(c.a) - node(c.b);
            let i = warp * (2.0 * c.c / dt) * v;
            c.v = v.im;
            c.i = i.im;
        }
        for l in &mut self.inds {
            let v = node(l.a) - node(l.b);
            let i = rl_admittance(l) * v;
            l.v = v.im;
            l.i = i.im;
        }
        for line in &mut self.lines {
            let waves: Vec<Complex64> = (0..2)
                .map(|p| {
                    let (a, b) = line.ports[p];
                    node(a) - node(b) + xp[line.branches[p]] * line.z
                })
                .collect();
            let len = line.history[0].len();
            line.head = 0;
            for back in 0..len {
                let slot_idx = (len - back) % len;
                let zb = z.powi(-(back as i32));
                line.history[0][slot_idx] = (waves[0] * zb).im;
                line.history[1][slot_idx] = (waves[1] * zb).im;
            }
        }
        for (k, v) in xp.iter().enumerate() {
            self.x[k] = v.im;
        }
        self.x[n] = 0.0;
        self.trapezoidal = true;
        self.sample();
        Ok(())
    }

    /// Advances one step with internally generated source values.
    pub fn step(&mut self) -> Result<&[f64], TransientError> {
        self.advance(&[])
    }

    /// Advances one step with `samples[k]` driving the k-th external source
    /// (in element order) at the new time point.
    pub fn step_external(&mut self, samples: &[f64]) -> Result<&[f64], TransientError> {
        if samples.len() != self.external.len() {
            return Err(TransientError::ExternalArity {
                expected: self.external.len(),
                got: samples.len(),
            });
        }
        self.advance(samples)
    }

    fn advance(&mut self, ext: &[f64]) -> Result<&[f64], TransientError> {
        if self.closed {
            return Err(TransientError::SessionClosed);
        }
        let t = (self.step + 1) as f64 * self.dt;
        let trapezoidal = self.trapezoidal;
        let method = usize::from(trapezoidal);
        let rhs = &mut self.rhs;
        rhs.iter_mut().for_each(|v| *v = 0.0);
        let mut ext_iter = ext.iter();
        for s in &self.sources {
            rhs[s.branch] = match s.waveform {
                Waveform::External => ext_iter.next().copied().unwrap_or(0.0),
                Waveform::Dc(v) => v,
                ref w => w.value_at(t),
            };
        }
        for c in &self.caps {
            let g = c.g[method];
            let ieq = if trapezoidal { g * c.v + c.i } else { g * c.v };
            rhs[c.a] += ieq;
            rhs[c.b] -= ieq;
        }
        for l in &self.inds {
            let j = l.history(method);
            rhs[l.a] -= j;
            rhs[l.b] += j;
        }
        for line in &self.lines {
            rhs[line.branches[0]] = line.incoming(1);
            rhs[line.branches[1]] = line.incoming(0);
        }

        let n = self.size;
        let lu = if trapezoidal {
            &self.steady
        } else {
            &self.first
        };
        lu.solve_into(&self.rhs[..n], &mut self.x[..n]);

        let x = &self.x;
        for c in &mut self.caps {
            let g = c.g[method];
            let v = x[c.a] - x[c.b];
            c.i = if trapezoidal {
                g * (v - c.v) - c.i
            } else {
                g * (v - c.v)
            };
            c.v = v;
        }
        for l in &mut self.inds {
            let v = x[l.a] - x[l.b];
            l.i = l.coef[method].0 * v + l.history(method);
            l.v = v;
        }
        for line in &mut self.lines {
            let wave = |p: usize| {
                let (a, b) = line.ports[p];
                x[a] - x[b] + line.z * x[line.branches[p]]
            };
            let waves = [wave(0), wave(1)];
            line.push(waves);
        }
        self.step += 1;
        self.trapezoidal = true;
        self.sample();
        Ok(&self.values)
    }

    fn sample(&mut self) {
        for (slot, p) in self.values.iter_mut().zip(&self.probes) {
            *slot = match *p {
                ProbeKind::Slot(k) => self.x[k],
                ProbeKind::Capacitor(k) => self.caps[k].i,
                ProbeKind::Inductor(k) => self.inds[k].i,
                ProbeKind::Resistor { a, b, g } => g * (self.x[a] - self.x[b]),
            };
        }
    }
}

/// Runs a full transient analysis. Returns one trace per probe, in the
/// order requested, each with `steps + 1` samples starting at `t = 0`.
pub fn run_transient(
    circuit: &Circuit,
    cfg: &TransientConfig,
) -> Result<Vec<Trace>, TransientError> {
    if !(cfg.duration.is_finite() && cfg.duration > 0.0) {
        return Err(TransientError::BadConfig(format!(
            "duration must be positive, got {}",
            cfg.duration
        )));
    }
    let mut session = Session::open(circuit, cfg.dt, &cfg.probes)?;
    if session.external_count() > 0 {
        return Err(TransientError::BadConfig(
            "external sources need a stepped session".into(),
        ));
    }
    let steps = cfg.steps();
    let mut data: Vec<Vec<f64>> = cfg
        .probes
        .iter()
        .map(|_| Vec::with_capacity(steps + 1))
        .collect();
    let mut record = |vals: &[f64]| {
        for (d, v) in data.iter_mut().zip(vals) {
            d.push(*v);
        }
    };
    record(session.values());
    for _ in 0..steps {
        record(session.step()?);
    }
    let rate = 1.0 / cfg.dt;
    Ok(cfg
        .probes
        .iter()
        .zip(data)
        .map(|(name, samples)| Trace::new(name.clone(), samples, rate))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc() -> Circuit {
        let mut c = Circuit::new();
        c.vsource("V1", "in", "0", Waveform::step(1.0));
        c.resistor("R1", "in", "out", 1e3);
        c.capacitor("C1", "out", "0", 1e-9);
        c
    }

    fn rc_error(dt: f64) -> f64 {
        let tau = 1e-6;
        let cfg = TransientConfig::new(dt, 5.0 * tau, &["V(out)"]);
        let tr = &run_transient(&rc(), &cfg).unwrap()[0];
        tr.samples
            .iter()
            .enumerate()
            .map(|(k, v)| (v - (1.0 - (-tr.time(k) / tau).exp())).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rc_step_accuracy_and_order() {
        let e1 = rc_error(1e-9);
        let e2 = rc_error(0.5e-9);
        assert!(e1 < 1e-3, "error {e1}");
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_sources_give_zero() {
        let mut c = Circuit::new();
        c.vsource("V1", "in", "0", Waveform::Dc(0.0));
        c.resistor("R1", "in", "out", 1e3);
        c.capacitor("C1", "out", "0", 1e-9);
        c.line("T1", ("out", "0"), ("far", "0"), 50.0, 1e-6);
        c.resistor("R2", "far", "0", 10.0);
        let cfg = TransientConfig::new(1e-8, 5e-6, &["out", "far", "I(V1)"]);
        for tr in run_transient(&c, &cfg).unwrap() {
            assert!(tr.samples.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn coarse_step_rejected() {
        let mut c = Circuit::new();
        c.vsource("V1", "in", "0", Waveform::step(1.0));
        c.line("T1", ("in", "0"), ("far", "0"), 50.0, 1e-6);
        c.resistor("R2", "far", "0", 50.0);
        let cfg = TransientConfig::new(1e-6 / 49.0, 5e-6, &["far"]);
        assert!(matches!(
            run_transient(&c, &cfg),
            Err(TransientError::StepTooCoarse { .. })
        ));
    }

    #[test]
    fn external_matches_internal_waveform() {
        let w = Waveform::sine_burst(1.0, 1e5, 3);
        let mut a = rc();
        a.vsource("V2", "x", "0", w.clone());
        a.resistor("R3", "x", "out", 2e3);
        let mut b = rc();
        b.vsource("V2", "x", "0", Waveform::External);
        b.resistor("R3", "x", "out", 2e3);
        let probes = vec!["out".to_string()];
        let mut sa = Session::open(&a, 1e-8, &probes).unwrap();
        let mut sb = Session::open(&b, 1e-8, &probes).unwrap();
        for k in 1..=3000 {
            let va = sa.step().unwrap()[0];
            let vb = sb.step_external(&[w.value_at(k as f64 * 1e-8)]).unwrap()[0];
            assert_eq!(va.to_bits(), vb.to_bits());
        }
        sb.close();
        assert_eq!(sb.step_external(&[0.0]), Err(TransientError::SessionClosed));
    }

    #[test]
    fn csv_header_and_rows() {
        let cfg = TransientConfig::new(1e-7, 3e-7, &["V(out)", "I(C1)"]);
        let traces = run_transient(&rc(), &cfg).unwrap();
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,V(out),I(C1)");
        assert_eq!(lines.len(), 5);
    }
}
