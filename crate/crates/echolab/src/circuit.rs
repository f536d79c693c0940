//! Linear circuit description and frequency-domain MNA assembly.
//!
//! A [`Circuit`] is a node table plus a flat list of [`Element`]s. Node 0 is
//! ground and is always named `"0"`. The unknown vector used by both the AC
//! and transient engines is the node voltages (ground excluded) followed by
//! one branch current per voltage source, voltage-controlled source,
//! zero-ohm resistor and inductor, and two per lossless line (one per port).
//!
//! Sign conventions follow the usual simulator rules. The branch current of a
//! voltage source flows from its positive node through the source to its
//! negative node. A current-controlled source with gain `g` sensing source
//! `V` pushes `g I(V)` out of its positive node, through itself, into its
//! negative node. Line port currents flow into the line at the port's
//! positive terminal.
//!
//! # Leach transducer expansion
//!
//! [`expand_piezo`] builds the thickness-mode model with these internal nodes
//! (prefix `X`):
//!
//! ```text
//! E  --V1-- X.2          C0 from X.2 to Eref
//! F1 (gain h C0, senses V2) from Eref into X.2
//! F2 (gain h, senses V1) from Eref into X.4
//! C1 = 1 F and R1 = 1 kOhm from X.4 to Eref
//! T1: port 1 (B, X.3), port 2 (F, X.3), impedance Zc, delay tau_c
//! X.3 --V2-- X.5,   E1: V(X.5) - V(Bref) = V(X.4) - V(Eref)
//! ```
//!
//! `V(X.4)` integrates the electrical current, so it is `h Q`, and E1 puts
//! the force `h Q` in series with the acoustic mesh. With both acoustic
//! ports shorted the electrical impedance is
//! `(1/(j w C0)) (1 - k^2 tan(theta)/theta)` with `theta = w tau_c / 2` and
//! `k^2 = h^2 C0 tau_c / Zc`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{DenseMatrix, LinalgError, LuFactors, Scalar};
use crate::piezo::{ParamError, TransducerParams};

pub type NodeId = usize;

pub const GROUND: NodeId = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CircuitError {
    #[error("singular system at pivot {pivot}")]
    SingularSystem { pivot: usize },
    #[error("invalid transducer parameters: {0}")]
    InvalidParams(#[from] ParamError),
    #[error("circuit failed validation: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("angular frequency must be finite and positive, got {0}")]
    BadFrequency(f64),
    #[error("unknown probe {0:?}")]
    UnknownProbe(String),
}

impl From<LinalgError> for CircuitError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular { pivot } => CircuitError::SingularSystem { pivot },
            LinalgError::Dimension { .. } => CircuitError::SingularSystem { pivot: 0 },
        }
    }
}

/// Source waveforms. All times are seconds and frequencies hertz.
#[derive(Debug, Clone, PartialEq)]
pub enum Waveform {
    Dc(f64),
    /// `cycles = None` keeps the sine running forever.
    SineBurst {
        amplitude: f64,
        frequency: f64,
        cycles: Option<u32>,
        start: f64,
    },
    /// Linear sweep from `f0` to `f1` over `duration`, zero outside.
    Chirp {
        amplitude: f64,
        f0: f64,
        f1: f64,
        duration: f64,
        start: f64,
    },
    Pulse {
        v1: f64,
        v2: f64,
        delay: f64,
        rise: f64,
        fall: f64,
        width: f64,
        period: Option<f64>,
    },
    /// Value supplied sample by sample from outside the engine.
    External,
}

impl Waveform {
    pub fn sine_burst(amplitude: f64, frequency: f64, cycles: u32) -> Self {
        Waveform::SineBurst {
            amplitude,
            frequency,
            cycles: Some(cycles),
            start: 0.0,
        }
    }

    pub fn sine(amplitude: f64, frequency: f64) -> Self {
        Waveform::SineBurst {
            amplitude,
            frequency,
            cycles: None,
            start: 0.0,
        }
    }

    pub fn step(level: f64) -> Self {
        Waveform::Pulse {
            v1: 0.0,
            v2: level,
            delay: 0.0,
            rise: 0.0,
            fall: 0.0,
            width: f64::INFINITY,
            period: None,
        }
    }

    /// Value at time `t`. External sources report zero here.
    pub fn value_at(&self, t: f64) -> f64 {
        match *self {
            Waveform::Dc(v) => v,
            Waveform::SineBurst {
                amplitude,
                frequency,
                cycles,
                start,
            } => {
                let tau = t - start;
                if tau < 0.0 {
                    return 0.0;
                }
                if let Some(n) = cycles {
                    if tau >= f64::from(n) / frequency {
                        return 0.0;
                    }
                }
                amplitude * (2.0 * PI * frequency * tau).sin()
            }
            Waveform::Chirp {
                amplitude,
                f0,
                f1,
                duration,
                start,
            } => {
                let tau = t - start;
                if tau < 0.0 || tau >= duration {
                    return 0.0;
                }
                let phase = f0 * tau + (f1 - f0) * tau * tau / (2.0 * duration);
                amplitude * (2.0 * PI * phase).sin()
            }
            Waveform::Pulse {
                v1,
                v2,
                delay,
                rise,
                fall,
                width,
                period,
            } => {
                let mut tau = t - delay;
                if tau < 0.0 {
                    return v1;
                }
                if let Some(p) = period {
                    tau %= p;
                }
                if tau < rise {
                    v1 + (v2 - v1) * tau / rise
                } else if tau < rise + width {
                    v2
                } else if tau < rise + width + fall {
                    v2 + (v1 - v2) * (tau - rise - width) / fall
                } else {
                    v1
                }
            }
            Waveform::External => 0.0,
        }
    }

    /// Time after which the waveform stays at its final value, if any.
    pub fn active_until(&self) -> Option<f64> {
        match *self {
            Waveform::SineBurst {
                frequency,
                cycles: Some(n),
                start,
                ..
            } => Some(start + f64::from(n) / frequency),
            Waveform::Chirp {
                duration, start, ..
            } => Some(start + duration),
            _ => None,
        }
    }

    fn check(&self) -> Result<(), String> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite"))
            }
        };
        match *self {
            Waveform::Dc(v) => finite("level", v),
            Waveform::SineBurst {
                amplitude,
                frequency,
                start,
                ..
            } => {
                finite("amplitude", amplitude)?;
                finite("start", start)?;
                if !(frequency.is_finite() && frequency > 0.0) {
                    return Err("frequency must be positive".into());
                }
                Ok(())
            }
            Waveform::Chirp {
                amplitude,
                f0,
                f1,
                duration,
                start,
            } => {
                finite("amplitude", amplitude)?;
                finite("start", start)?;
                if !(f0 > 0.0 && f1 > 0.0 && f0.is_finite() && f1.is_finite()) {
                    return Err("chirp frequencies must be positive".into());
                }
                if !(duration.is_finite() && duration > 0.0) {
                    return Err("chirp duration must be positive".into());
                }
                Ok(())
            }
            Waveform::Pulse {
                v1,
                v2,
                delay,
                rise,
                fall,
                width,
                period,
            } => {
                finite("v1", v1)?;
                finite("v2", v2)?;
                finite("delay", delay)?;
                if rise < 0.0 || fall < 0.0 || width < 0.0 || rise.is_nan() || fall.is_nan() {
                    return Err("pulse timings must be non-negative".into());
                }
                if let Some(p) = period {
                    if !(p.is_finite() && p > 0.0) {
                        return Err("pulse period must be positive".into());
                    }
                }
                Ok(())
            }
            Waveform::External => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ElementKind {
    Resistor {
        a: NodeId,
        b: NodeId,
        ohms: f64,
    },
    Capacitor {
        a: NodeId,
        b: NodeId,
        farads: f64,
        initial_voltage: f64,
    },
    Inductor {
        a: NodeId,
        b: NodeId,
        henries: f64,
        initial_current: f64,
    },
    VoltageSource {
        pos: NodeId,
        neg: NodeId,
        waveform: Waveform,
        /// Phasor magnitude in AC analysis; `None` uses the default
        /// (0 for DC sources, 1 otherwise).
        ac: Option<f64>,
    },
    Vcvs {
        pos: NodeId,
        neg: NodeId,
        ctrl_pos: NodeId,
        ctrl_neg: NodeId,
        gain: f64,
    },
    Cccs {
        pos: NodeId,
        neg: NodeId,
        sensed: String,
        gain: f64,
    },
    LosslessLine {
        p1: NodeId,
        n1: NodeId,
        p2: NodeId,
        n2: NodeId,
        impedance: f64,
        delay: f64,
    },
    /// Distributed R', L', C' line, simulated as `segments` series R-L /
    /// shunt C sections returning through `n1` (which must equal `n2`).
    LossyLine {
        p1: NodeId,
        n1: NodeId,
        p2: NodeId,
        n2: NodeId,
        r_per_m: f64,
        l_per_m: f64,
        c_per_m: f64,
        length: f64,
        segments: usize,
    },
}

impl ElementKind {
    /// Terminals that carry current, in declaration order.
    pub fn terminals(&self) -> Vec<NodeId> {
        match *self {
            ElementKind::Resistor { a, b, .. }
            | ElementKind::Capacitor { a, b, .. }
            | ElementKind::Inductor { a, b, .. } => vec![a, b],
            ElementKind::VoltageSource { pos, neg, .. }
            | ElementKind::Vcvs { pos, neg, .. }
            | ElementKind::Cccs { pos, neg, .. } => vec![pos, neg],
            ElementKind::LosslessLine { p1, n1, p2, n2, .. }
            | ElementKind::LossyLine { p1, n1, p2, n2, .. } => vec![p1, n1, p2, n2],
        }
    }

    /// Copy with every node reference (controlling nodes included) passed through `f`.
    pub fn map_nodes(&self, mut f: impl FnMut(NodeId) -> NodeId) -> ElementKind {
        let mut k = self.clone();
        match &mut k {
            ElementKind::Resistor { a, b, .. }
            | ElementKind::Capacitor { a, b, .. }
            | ElementKind::Inductor { a, b, .. } => {
                *a = f(*a);
                *b = f(*b);
            }
            ElementKind::VoltageSource { pos, neg, .. } | ElementKind::Cccs { pos, neg, .. } => {
                *pos = f(*pos);
                *neg = f(*neg);
            }
            ElementKind::Vcvs {
                pos,
                neg,
                ctrl_pos,
                ctrl_neg,
                ..
            } => {
                *pos = f(*pos);
                *neg = f(*neg);
                *ctrl_pos = f(*ctrl_pos);
                *ctrl_neg = f(*ctrl_neg);
            }
            ElementKind::LosslessLine { p1, n1, p2, n2, .. }
            | ElementKind::LossyLine { p1, n1, p2, n2, .. } => {
                *p1 = f(*p1);
                *n1 = f(*n1);
                *p2 = f(*p2);
                *n2 = f(*n2);
            }
        }
        k
    }

    pub fn letter(&self) -> char {
        match self {
            ElementKind::Resistor { .. } => 'R',
            ElementKind::Capacitor { .. } => 'C',
            ElementKind::Inductor { .. } => 'L',
            ElementKind::VoltageSource { .. } => 'V',
            ElementKind::Vcvs { .. } => 'E',
            ElementKind::Cccs { .. } => 'F',
            ElementKind::LosslessLine { .. } => 'T',
            ElementKind::LossyLine { .. } => 'O',
        }
    }

    /// Number of MNA branch unknowns this element adds.
    pub fn branch_count(&self) -> usize {
        match self {
            ElementKind::Resistor { ohms, .. } => usize::from(*ohms == 0.0),
            ElementKind::Inductor { .. }
            | ElementKind::VoltageSource { .. }
            | ElementKind::Vcvs { .. } => 1,
            ElementKind::LosslessLine { .. } => 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub kind: ElementKind,
}

impl Element {
    pub fn new(name: impl Into<String>, kind: ElementKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    nodes: Vec<String>,
    index: HashMap<String, NodeId>,
    elements: Vec<Element>,
}

impl Default for Circuit {
    fn default() -> Self {
        Self::new()
    }
}

impl Circuit {
    pub fn new() -> Self {
        let mut index = HashMap::new();
        index.insert("0".to_string(), GROUND);
        Self {
            nodes: vec!["0".to_string()],
            index,
            elements: Vec::new(),
        }
    }

    /// Returns the id of `name`, creating the node if needed. `"0"` and
    /// `"gnd"` are ground.
    pub fn node(&mut self, name: &str) -> NodeId {
        if name.eq_ignore_ascii_case("gnd") {
            return GROUND;
        }
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        if name.eq_ignore_ascii_case("gnd") {
            return Some(GROUND);
        }
        self.index.get(name).copied()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id]
    }

    /// Node count including ground.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.nodes
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }

    pub fn add(&mut self, element: Element) -> &mut Self {
        self.elements.push(element);
        self
    }

    pub fn resistor(&mut self, name: &str, a: &str, b: &str, ohms: f64) -> &mut Self {
        let (a, b) = (self.node(a), self.node(b));
        self.add(Element::new(name, ElementKind::Resistor { a, b, ohms }))
    }

    pub fn capacitor(&mut self, name: &str, a: &str, b: &str, farads: f64) -> &mut Self {
        let (a, b) = (self.node(a), self.node(b));
        self.add(Element::new(
            name,
            ElementKind::Capacitor {
                a,
                b,
                farads,
                initial_voltage: 0.0,
            },
        ))
    }

    pub fn inductor(&mut self, name: &str, a: &str, b: &str, henries: f64) -> &mut Self {
        let (a, b) = (self.node(a), self.node(b));
        self.add(Element::new(
            name,
            ElementKind::Inductor {
                a,
                b,
                henries,
                initial_current: 0.0,
            },
        ))
    }

    pub fn vsource(&mut self, name: &str, pos: &str, neg: &str, waveform: Waveform) -> &mut Self {
        let (pos, neg) = (self.node(pos), self.node(neg));
        self.add(Element::new(
            name,
            ElementKind::VoltageSource {
                pos,
                neg,
                waveform,
                ac: None,
            },
        ))
    }

    pub fn line(
        &mut self,
        name: &str,
        port1: (&str, &str),
        port2: (&str, &str),
        impedance: f64,
        delay: f64,
    ) -> &mut Self {
        let (p1, n1) = (self.node(port1.0), self.node(port1.1));
        let (p2, n2) = (self.node(port2.0), self.node(port2.1));
        self.add(Element::new(
            name,
            ElementKind::LosslessLine {
                p1,
                n1,
                p2,
                n2,
                impedance,
                delay,
            },
        ))
    }

    /// Smallest lossless-line delay, after flattening.
    pub fn min_line_delay(&self) -> Option<f64> {
        self.elements
            .iter()
            .filter_map(|e| match e.kind {
                ElementKind::LosslessLine { delay, .. } => Some(delay),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn has_lossy_lines(&self) -> bool {
        self.elements
            .iter()
            .any(|e| matches!(e.kind, ElementKind::LossyLine { .. }))
    }

    /// Copy with every lossy line replaced by its R-L-C ladder. Segment `k`
    /// (1-based) of line `O` adds `O.R{k}` (skipped when `R' = 0`), `O.L{k}`
    /// and the shunt `O.C{k}` at the segment's far end.
    pub fn flattened(&self) -> Circuit {
        if !self.has_lossy_lines() {
            return self.clone();
        }
        let mut out = Circuit {
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            elements: Vec::with_capacity(self.elements.len()),
        };
        for element in &self.elements {
            let ElementKind::LossyLine {
                p1,
                n1,
                p2,
                r_per_m,
                l_per_m,
                c_per_m,
                length,
                segments,
                ..
            } = element.kind
            else {
                out.elements.push(element.clone());
                continue;
            };
            let name = &element.name;
            let seg = length / segments as f64;
            let mut from = p1;
            for k in 1..=segments {
                let to = if k == segments {
                    p2
                } else {
                    out.node(&format!("{name}.a{k}"))
                };
                let mid = if r_per_m > 0.0 {
                    let mid = out.node(&format!("{name}.b{k}"));
                    out.add(Element::new(
                        format!("{name}.R{k}"),
                        ElementKind::Resistor {
                            a: from,
                            b: mid,
                            ohms: r_per_m * seg,
                        },
                    ));
                    mid
                } else {
                    from
                };
                out.add(Element::new(
                    format!("{name}.L{k}"),
                    ElementKind::Inductor {
                        a: mid,
                        b: to,
                        henries: l_per_m * seg,
                        initial_current: 0.0,
                    },
                ));
                out.add(Element::new(
                    format!("{name}.C{k}"),
                    ElementKind::Capacitor {
                        a: to,
                        b: n1,
                        farads: c_per_m * seg,
                        initial_voltage: 0.0,
                    },
                ));
                from = to;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosticKind {
    UnresolvedSensedSource,
    FloatingNode,
    InvalidValue,
    DuplicateName,
    ReferenceMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    /// Offending element or node name.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{}]: {}", self.kind, self.subject, self.message)
    }
}

fn value_problem(kind: &ElementKind) -> Option<String> {
    let pos = |name: &str, v: f64| {
        (!(v.is_finite() && v > 0.0))
            .then(|| format!("{name} must be finite and positive, got {v}"))
    };
    let fin =
        |name: &str, v: f64| (!v.is_finite()).then(|| format!("{name} must be finite, got {v}"));
    match kind {
        ElementKind::Resistor { ohms, .. } => (!(ohms.is_finite() && *ohms >= 0.0))
            .then(|| format!("resistance must be finite and non-negative, got {ohms}")),
        ElementKind::Capacitor {
            farads,
            initial_voltage,
            ..
        } => pos("capacitance", *farads).or_else(|| fin("initial voltage", *initial_voltage)),
        ElementKind::Inductor {
            henries,
            initial_current,
            ..
        } => pos("inductance", *henries).or_else(|| fin("initial current", *initial_current)),
        ElementKind::VoltageSource { waveform, ac, .. } => waveform
            .check()
            .err()
            .or_else(|| ac.and_then(|a| fin("AC magnitude", a))),
        ElementKind::Vcvs { gain, .. } | ElementKind::Cccs { gain, .. } => fin("gain", *gain),
        ElementKind::LosslessLine {
            impedance, delay, ..
        } => pos("line impedance", *impedance).or_else(|| pos("line delay", *delay)),
        ElementKind::LossyLine {
            r_per_m,
            l_per_m,
            c_per_m,
            length,
            segments,
            ..
        } => (!(r_per_m.is_finite() && *r_per_m >= 0.0))
            .then(|| format!("R' must be finite and non-negative, got {r_per_m}"))
            .or_else(|| pos("L'", *l_per_m))
            .or_else(|| pos("C'", *c_per_m))
            .or_else(|| pos("length", *length))
            .or_else(|| (*segments == 0).then(|| "segment count must be at least 1".to_string())),
    }
}

/// Checks the circuit invariants. An empty list means the circuit is ready
/// for analysis.
///
/// A node is floating when no chain of elements connects it to ground
/// (controlled-source sense terminals do not count), or when the only thing
/// attached to it is a single capacitor plate.
pub fn validate(circuit: &Circuit) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let vsources: HashSet<&str> = circuit
        .elements
        .iter()
        .filter(|e| matches!(e.kind, ElementKind::VoltageSource { .. }))
        .map(|e| e.name.as_str())
        .collect();
    for e in &circuit.elements {
        if !seen.insert(e.name.to_ascii_lowercase()) {
            out.push(Diagnostic {
                kind: DiagnosticKind::DuplicateName,
                subject: e.name.clone(),
                message: "element name is used more than once".into(),
            });
        }
        if let Some(message) = value_problem(&e.kind) {
            out.push(Diagnostic {
                kind: DiagnosticKind::InvalidValue,
                subject: e.name.clone(),
                message,
            });
        }
        match &e.kind {
            ElementKind::Cccs { sensed, .. } if !vsources.contains(sensed.as_str()) => {
                out.push(Diagnostic {
                    kind: DiagnosticKind::UnresolvedSensedSource,
                    subject: e.name.clone(),
                    message: format!("sensed source {sensed:?} is not a voltage source"),
                });
            }
            ElementKind::LossyLine { n1, n2, .. } if n1 != n2 => out.push(Diagnostic {
                kind: DiagnosticKind::ReferenceMismatch,
                subject: e.name.clone(),
                message: "lossy line ports must share one reference node".into(),
            }),
            _ => {}
        }
    }

    let n = circuit.node_count();
    let mut adjacency = vec![Vec::new(); n];
    let mut incidence: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, e) in circuit.elements.iter().enumerate() {
        let terms = e.kind.terminals();
        for &a in &terms {
            if a < n {
                incidence[a].push(idx);
            }
            for &b in &terms {
                if a != b && a < n && b < n {
                    adjacency[a].push(b);
                }
            }
        }
    }
    let mut reached = vec![false; n];
    reached[GROUND] = true;
    let mut queue = VecDeque::from([GROUND]);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if !reached[w] {
                reached[w] = true;
                queue.push_back(w);
            }
        }
    }
    for node in 1..n {
        let lone_cap = incidence[node].len() == 1
            && matches!(
                circuit.elements[incidence[node][0]].kind,
                ElementKind::Capacitor { .. }
            );
        if !reached[node] || lone_cap {
            let message = if lone_cap {
                "only a single capacitor plate is attached".to_string()
            } else {
                "no element path to ground".to_string()
            };
            out.push(Diagnostic {
                kind: DiagnosticKind::FloatingNode,
                subject: circuit.nodes[node].clone(),
                message,
            });
        }
    }
    out
}

/// Assignment of unknowns for a (flattened) circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct MnaLayout {
    node_names: Vec<String>,
    node_index: HashMap<String, NodeId>,
    element_names: Vec<String>,
    /// First branch unknown of each element, if it has any.
    branch_of: Vec<Option<usize>>,
    size: usize,
}

impl MnaLayout {
    pub fn new(circuit: &Circuit) -> Self {
        let nodes = circuit.node_count() - 1;
        let mut next = nodes;
        let branch_of = circuit
            .elements
            .iter()
            .map(|e| {
                let count = e.kind.branch_count();
                (count > 0).then(|| {
                    let first = next;
                    next += count;
                    first
                })
            })
            .collect();
        Self {
            node_names: circuit.nodes.clone(),
            node_index: circuit.index.clone(),
            element_names: circuit.elements.iter().map(|e| e.name.clone()).collect(),
            branch_of,
            size: next,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Unknown index of a node voltage; `None` for ground.
    pub fn node_unknown(node: NodeId) -> Option<usize> {
        (node != GROUND).then(|| node - 1)
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        if name.eq_ignore_ascii_case("gnd") {
            return Some(GROUND);
        }
        self.node_index.get(name).copied()
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.element_names.iter().position(|n| n == name)
    }

    pub fn branch_of(&self, element: usize) -> Option<usize> {
        self.branch_of[element]
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }
}

/// Resolves `V(node)`, `I(element)` or a bare node name against a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Voltage(NodeId),
    Current { element: usize },
}

pub fn resolve_probe(
    layout: &MnaLayout,
    circuit: &Circuit,
    text: &str,
) -> Result<Probe, CircuitError> {
    let t = text.trim();
    let inner = |prefix: char| {
        let up = t.to_ascii_uppercase();
        (up.starts_with(prefix) && up[1..].starts_with('(') && t.ends_with(')'))
            .then(|| t[2..t.len() - 1].trim())
    };
    if let Some(name) = inner('I') {
        let idx = layout
            .element_index(name)
            .ok_or_else(|| CircuitError::UnknownProbe(text.to_string()))?;
        return match circuit.elements[idx].kind {
            ElementKind::Resistor { .. }
            | ElementKind::Capacitor { .. }
            | ElementKind::Inductor { .. }
            | ElementKind::VoltageSource { .. }
            | ElementKind::Vcvs { .. } => Ok(Probe::Current { element: idx }),
            _ => Err(CircuitError::UnknownProbe(text.to_string())),
        };
    }
    let name = inner('V').unwrap_or(t);
    layout
        .node_by_name(name)
        .map(Probe::Voltage)
        .ok_or_else(|| CircuitError::UnknownProbe(text.to_string()))
}

/// Additive MNA stamping into a dense matrix.
pub(crate) struct Stamper<'a, T> {
    pub matrix: &'a mut DenseMatrix<T>,
}

impl<T: Scalar> Stamper<'_, T> {
    fn add(&mut self, r: Option<usize>, c: Option<usize>, v: T) {
        if let (Some(r), Some(c)) = (r, c) {
            self.matrix.add(r, c, v);
        }
    }

    pub fn admittance(&mut self, a: NodeId, b: NodeId, y: T) {
        let (ra, rb) = (MnaLayout::node_unknown(a), MnaLayout::node_unknown(b));
        self.add(ra, ra, y);
        self.add(rb, rb, y);
        self.add(ra, rb, T::zero() - y);
        self.add(rb, ra, T::zero() - y);
    }

    /// KCL incidence of branch `j` flowing from `a` to `b`, plus the
    /// `V(a) - V(b)` part of its branch equation.
    pub fn branch(&mut self, j: usize, a: NodeId, b: NodeId) {
        let (ra, rb) = (MnaLayout::node_unknown(a), MnaLayout::node_unknown(b));
        let one = T::one();
        self.add(ra, Some(j), one);
        self.add(rb, Some(j), T::zero() - one);
        self.add(Some(j), ra, one);
        self.add(Some(j), rb, T::zero() - one);
    }

    /// Only the KCL incidence of branch `j` (for line ports).
    pub fn incidence(&mut self, j: usize, a: NodeId, b: NodeId) {
        let (ra, rb) = (MnaLayout::node_unknown(a), MnaLayout::node_unknown(b));
        self.add(ra, Some(j), T::one());
        self.add(rb, Some(j), T::zero() - T::one());
    }

    /// Adds `coef * (V(a) - V(b))` to row `row`.
    pub fn voltage_term(&mut self, row: usize, a: NodeId, b: NodeId, coef: T) {
        self.add(Some(row), MnaLayout::node_unknown(a), coef);
        self.add(Some(row), MnaLayout::node_unknown(b), T::zero() - coef);
    }

    pub fn entry(&mut self, row: usize, col: usize, v: T) {
        self.matrix.add(row, col, v);
    }

    /// Current `gain * I(branch)` leaving `pos` and entering `neg`.
    pub fn controlled_current(&mut self, pos: NodeId, neg: NodeId, branch: usize, gain: T) {
        self.add(MnaLayout::node_unknown(pos), Some(branch), gain);
        self.add(MnaLayout::node_unknown(neg), Some(branch), T::zero() - gain);
    }
}

/// Stamps the parts shared by both engines: resistors, sources and
/// controlled sources. Returns an error for an unresolved sensed source.
pub(crate) fn stamp_static<T: Scalar + From<f64>>(
    circuit: &Circuit,
    layout: &MnaLayout,
    stamper: &mut Stamper<'_, T>,
) -> Result<(), CircuitError> {
    for (idx, e) in circuit.elements.iter().enumerate() {
        match &e.kind {
            ElementKind::Resistor { a, b, ohms } => {
                if *ohms == 0.0 {
                    let j = layout.branch_of(idx).expect("short has a branch");
                    stamper.branch(j, *a, *b);
                } else {
                    stamper.admittance(*a, *b, T::from(1.0 / ohms));
                }
            }
            ElementKind::VoltageSource { pos, neg, .. } => {
                let j = layout.branch_of(idx).expect("source has a branch");
                stamper.branch(j, *pos, *neg);
            }
            ElementKind::Vcvs {
                pos,
                neg,
                ctrl_pos,
                ctrl_neg,
                gain,
            } => {
                let j = layout.branch_of(idx).expect("vcvs has a branch");
                stamper.branch(j, *pos, *neg);
                stamper.voltage_term(j, *ctrl_pos, *ctrl_neg, T::from(-gain));
            }
            ElementKind::Cccs {
                pos,
                neg,
                sensed,
                gain,
            } => {
                let sensed_idx = layout
                    .element_index(sensed)
                    .filter(|&i| {
                        matches!(circuit.elements[i].kind, ElementKind::VoltageSource { .. })
                    })
                    .ok_or_else(|| {
                        CircuitError::Invalid(vec![Diagnostic {
                            kind: DiagnosticKind::UnresolvedSensedSource,
                            subject: e.name.clone(),
                            message: format!("sensed source {sensed:?} is not a voltage source"),
                        }])
                    })?;
                let j = layout.branch_of(sensed_idx).expect("source has a branch");
                stamper.controlled_current(*pos, *neg, j, T::from(*gain));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Phasor amplitude a source contributes in AC analysis.
pub fn ac_magnitude(waveform: &Waveform, ac: Option<f64>) -> f64 {
    ac.unwrap_or(match waveform {
        Waveform::Dc(_) => 0.0,
        _ => 1.0,
    })
}

/// Complex MNA system at one angular frequency.
#[derive(Debug, Clone)]
pub struct AcSystem {
    pub matrix: DenseMatrix<Complex64>,
    pub rhs: Vec<Complex64>,
    pub layout: MnaLayout,
}

/// Solution vector with name-based accessors.
#[derive(Debug, Clone)]
pub struct AcSolution {
    pub values: Vec<Complex64>,
    pub layout: MnaLayout,
}

impl AcSolution {
    pub fn voltage(&self, node: &str) -> Option<Complex64> {
        let id = self.layout.node_by_name(node)?;
        Some(match MnaLayout::node_unknown(id) {
            Some(k) => self.values[k],
            None => Complex64::new(0.0, 0.0),
        })
    }

    /// Branch current of a voltage source, VCVS, short or inductor.
    pub fn current(&self, element: &str) -> Option<Complex64> {
        let idx = self.layout.element_index(element)?;
        self.layout.branch_of(idx).map(|j| self.values[j])
    }
}

impl AcSystem {
    pub fn solve(&self) -> Result<AcSolution, CircuitError> {
        let lu = LuFactors::factor(&self.matrix)?;
        Ok(AcSolution {
            values: lu.solve(&self.rhs)?,
            layout: self.layout.clone(),
        })
    }
}

/// Builds the complex MNA system at angular frequency `omega`. Lossy lines
/// are flattened to ladders first; lossless lines use their exact two-port
/// relation in chain-parameter form, which stays regular at every `omega`.
pub fn assemble_ac(circuit: &Circuit, omega: f64) -> Result<AcSystem, CircuitError> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(CircuitError::BadFrequency(omega));
    }
    let flat = circuit.flattened();
    let layout = MnaLayout::new(&flat);
    let n = layout.size();
    let mut matrix = DenseMatrix::zeros(n);
    let mut rhs = vec![Complex64::new(0.0, 0.0); n];
    let j = Complex64::new(0.0, 1.0);
    {
        let mut st = Stamper {
            matrix: &mut matrix,
        };
        stamp_static(&flat, &layout, &mut st)?;
        for (idx, e) in flat.elements.iter().enumerate() {
            match &e.kind {
                ElementKind::Capacitor { a, b, farads, .. } => {
                    st.admittance(*a, *b, j * (omega * farads));
                }
                ElementKind::Inductor { a, b, henries, .. } => {
                    let k = layout.branch_of(idx).expect("inductor has a branch");
                    st.branch(k, *a, *b);
                    st.entry(k, k, -j * (omega * henries));
                }
                ElementKind::VoltageSource { waveform, ac, .. } => {
                    let k = layout.branch_of(idx).expect("source has a branch");
                    rhs[k] = Complex64::new(ac_magnitude(waveform, *ac), 0.0);
                }
                ElementKind::LosslessLine {
                    p1,
                    n1,
                    p2,
                    n2,
                    impedance,
                    delay,
                } => {
                    let k1 = layout.branch_of(idx).expect("line has branches");
                    let k2 = k1 + 1;
                    let theta = omega * delay;
                    let (s, c) = theta.sin_cos();
                    st.incidence(k1, *p1, *n1);
                    st.incidence(k2, *p2, *n2);
                    // V1 - cos V2 + j Z sin I2 = 0
                    st.voltage_term(k1, *p1, *n1, Complex64::new(1.0, 0.0));
                    st.voltage_term(k1, *p2, *n2, Complex64::new(-c, 0.0));
                    st.entry(k1, k2, j * (impedance * s));
                    // I1 - j (sin/Z) V2 + cos I2 = 0
                    st.entry(k2, k1, Complex64::new(1.0, 0.0));
                    st.voltage_term(k2, *p2, *n2, -j * (s / impedance));
                    st.entry(k2, k2, Complex64::new(c, 0.0));
                }
                _ => {}
            }
        }
    }
    Ok(AcSystem {
        matrix,
        rhs,
        layout,
    })
}

/// Solves the circuit at `omega` in one call.
pub fn solve_ac(circuit: &Circuit, omega: f64) -> Result<AcSolution, CircuitError> {
    assemble_ac(circuit, omega)?.solve()
}

/// Terminal pairs of a transducer macro.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PiezoPorts {
    pub electrical: (NodeId, NodeId),
    pub back: (NodeId, NodeId),
    pub front: (NodeId, NodeId),
}

pub const INTEGRATOR_R: f64 = 1e3;
pub const INTEGRATOR_C: f64 = 1.0;

/// Emits the Leach thickness-mode model for one transducer, allocating its
/// internal nodes in `circuit` under `prefix`. The acoustic ports must share
/// their reference node.
pub fn expand_piezo(
    circuit: &mut Circuit,
    prefix: &str,
    params: &TransducerParams,
    ports: PiezoPorts,
) -> Result<Vec<Element>, CircuitError> {
    params.screen()?;
    if ports.back.1 != ports.front.1 {
        return Err(CircuitError::Invalid(vec![Diagnostic {
            kind: DiagnosticKind::ReferenceMismatch,
            subject: prefix.to_string(),
            message: "back and front acoustic ports must share a reference node".into(),
        }]));
    }
    let (e, eref) = ports.electrical;
    let aref = ports.back.1;
    let n2 = circuit.node(&format!("{prefix}.2"));
    let n3 = circuit.node(&format!("{prefix}.3"));
    let n4 = circuit.node(&format!("{prefix}.4"));
    let n5 = circuit.node(&format!("{prefix}.5"));
    let name = |s: &str| format!("{prefix}.{s}");
    let ammeter = |pos, neg| ElementKind::VoltageSource {
        pos,
        neg,
        waveform: Waveform::Dc(0.0),
        ac: None,
    };
    Ok(vec![
        Element::new(name("V1"), ammeter(e, n2)),
        Element::new(
            name("C0"),
            ElementKind::Capacitor {
                a: n2,
                b: eref,
                farads: params.c0,
                initial_voltage: 0.0,
            },
        ),
        Element::new(
            name("F1"),
            ElementKind::Cccs {
                pos: eref,
                neg: n2,
                sensed: name("V2"),
                gain: params.h * params.c0,
            },
        ),
        Element::new(
            name("F2"),
            ElementKind::Cccs {
                pos: eref,
                neg: n4,
                sensed: name("V1"),
                gain: params.h,
            },
        ),
        Element::new(
            name("C1"),
            ElementKind::Capacitor {
                a: n4,
                b: eref,
                farads: INTEGRATOR_C,
                initial_voltage: 0.0,
            },
        ),
        Element::new(
            name("R1"),
            ElementKind::Resistor {
                a: n4,
                b: eref,
                ohms: INTEGRATOR_R,
            },
        ),
        Element::new(
            name("T1"),
            ElementKind::LosslessLine {
                p1: ports.back.0,
                n1: n3,
                p2: ports.front.0,
                n2: n3,
                impedance: params.zc,
                delay: params.tau_c,
            },
        ),
        Element::new(name("V2"), ammeter(n3, n5)),
        Element::new(
            name("E1"),
            ElementKind::Vcvs {
                pos: n5,
                neg: aref,
                ctrl_pos: n4,
                ctrl_neg: eref,
                gain: 1.0,
            },
        ),
    ])
}

/// Convenience wrapper that expands and adds a transducer by node names.
pub fn add_piezo(
    circuit: &mut Circuit,
    prefix: &str,
    params: &TransducerParams,
    electrical: (&str, &str),
    back: (&str, &str),
    front: (&str, &str),
) -> Result<(), CircuitError> {
    let ports = PiezoPorts {
        electrical: (circuit.node(electrical.0), circuit.node(electrical.1)),
        back: (circuit.node(back.0), circuit.node(back.1)),
        front: (circuit.node(front.0), circuit.node(front.1)),
    };
    for e in expand_piezo(circuit, prefix, params, ports)? {
        circuit.add(e);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn single_resistor_is_valid() {
        let mut ckt = Circuit::new();
        ckt.resistor("R1", "1", "0", 1e3);
        assert!(validate(&ckt).is_empty());
    }

    #[test]
    fn unresolved_sensed_source() {
        let mut ckt = Circuit::new();
        ckt.resistor("R1", "1", "0", 1e3);
        let (a, b) = (ckt.node("1"), GROUND);
        ckt.add(Element::new(
            "F1",
            ElementKind::Cccs {
                pos: a,
                neg: b,
                sensed: "V9".into(),
                gain: 1.0,
            },
        ));
        let d = validate(&ckt);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::UnresolvedSensedSource);
        assert_eq!(d[0].subject, "F1");
    }

    #[test]
    fn lone_capacitor_plate_is_floating() {
        let mut ckt = Circuit::new();
        ckt.resistor("R1", "1", "0", 1e3);
        ckt.capacitor("C1", "1", "2", 1e-9);
        let d = validate(&ckt);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::FloatingNode);
        assert_eq!(d[0].subject, "2");
    }

    #[test]
    fn disconnected_island_is_floating() {
        let mut ckt = Circuit::new();
        ckt.resistor("R1", "1", "0", 1e3);
        ckt.resistor("R2", "a", "b", 1e3);
        let d = validate(&ckt);
        let names: Vec<_> = d.iter().map(|d| d.subject.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn invalid_values_reported() {
        let mut ckt = Circuit::new();
        ckt.resistor("R1", "1", "0", -1.0);
        ckt.capacitor("C1", "1", "0", 0.0);
        ckt.line("T1", ("1", "0"), ("2", "0"), 50.0, 0.0);
        ckt.resistor("R2", "2", "0", 50.0);
        let d = validate(&ckt);
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|d| d.kind == DiagnosticKind::InvalidValue));
    }

    #[test]
    fn capacitor_current_is_omega_c() {
        let mut ckt = Circuit::new();
        ckt.vsource("V1", "1", "0", Waveform::sine(1.0, 1e3));
        ckt.capacitor("C1", "1", "0", 1e-6);
        let w = 2.0 * PI * 1e3;
        let sol = solve_ac(&ckt, w).unwrap();
        let i = sol.current("V1").unwrap();
        assert!((i.norm() - w * 1e-6).abs() < 1e-15);
    }

    #[test]
    fn series_rl_current() {
        let mut ckt = Circuit::new();
        ckt.vsource("V1", "1", "0", Waveform::sine(1.0, 1e3));
        ckt.resistor("R1", "1", "2", 10.0);
        ckt.inductor("L1", "2", "0", 1e-3);
        let w = 5e4;
        let sol = solve_ac(&ckt, w).unwrap();
        let expect = 1.0 / (100.0 + (w * 1e-3_f64).powi(2)).sqrt();
        assert!((sol.current("L1").unwrap().norm() - expect).abs() < 1e-14);
    }

    #[test]
    fn matched_line_has_unit_input_impedance_and_delay_phase() {
        let mut ckt = Circuit::new();
        ckt.vsource("V1", "1", "0", Waveform::sine(1.0, 1e3));
        ckt.line("T1", ("1", "0"), ("2", "0"), 50.0, 1e-6);
        ckt.resistor("RL", "2", "0", 50.0);
        for w in [1e5, 2.0 * PI * 2.5e5, 2.0 * PI * 5e5, 3e7] {
            let sol = solve_ac(&ckt, w).unwrap();
            let z = -1.0 / sol.current("V1").unwrap();
            assert!((z - c(50.0, 0.0)).norm() < 1e-9);
            let v2 = sol.voltage("2").unwrap();
            assert!((v2 - Complex64::from_polar(1.0, -w * 1e-6)).norm() < 1e-12);
        }
    }

    #[test]
    fn flattening_counts() {
        let mut ckt = Circuit::new();
        let (a, b) = (ckt.node("a"), ckt.node("b"));
        ckt.add(Element::new(
            "OAIR",
            ElementKind::LossyLine {
                p1: a,
                n1: GROUND,
                p2: b,
                n2: GROUND,
                r_per_m: 0.1232,
                l_per_m: 184.8e-6,
                c_per_m: 46e-3,
                length: 2e-3,
                segments: 32,
            },
        ));
        let flat = ckt.flattened();
        let count = |ch| {
            flat.elements()
                .iter()
                .filter(|e| e.kind.letter() == ch)
                .count()
        };
        assert_eq!((count('R'), count('L'), count('C')), (32, 32, 32));
        let ElementKind::Inductor { henries, .. } = flat.element("OAIR.L7").unwrap().kind else {
            panic!()
        };
        assert_eq!(henries, 184.8e-6 * (2e-3 / 32.0));
    }

    #[test]
    fn decoupled_piezo_is_pure_capacitance() {
        let params = TransducerParams::table_i_stated();
        let params = TransducerParams { h: 0.0, ..params };
        let mut ckt = Circuit::new();
        ckt.vsource("VS", "e", "0", Waveform::sine(1.0, 1e5));
        add_piezo(&mut ckt, "X", &params, ("e", "0"), ("0", "0"), ("0", "0")).unwrap();
        assert!(validate(&ckt).is_empty());
        for f in [1e4, 2.0e5, 2.3e5, 6e5] {
            let w = 2.0 * PI * f;
            let z = -1.0 / solve_ac(&ckt, w).unwrap().current("VS").unwrap();
            let expect = c(0.0, -1.0 / (w * params.c0));
            assert!(((z - expect) / expect).norm() < 1e-9);
        }
    }

    #[test]
    fn piezo_expansion_shape() {
        let params = TransducerParams::table_i_stated();
        let mut ckt = Circuit::new();
        let e = ckt.node("e");
        let ports = PiezoPorts {
            electrical: (e, GROUND),
            back: (GROUND, GROUND),
            front: (GROUND, GROUND),
        };
        let elems = expand_piezo(&mut ckt, "X", &params, ports).unwrap();
        let letters: String = elems.iter().map(|e| e.kind.letter()).collect();
        assert_eq!(letters, "VCFFCRTVE");
        let f1 = elems.iter().find(|e| e.name == "X.F1").unwrap();
        assert!(matches!(f1.kind, ElementKind::Cccs { gain, .. } if gain == params.h * params.c0));
    }
}
