//! Line-oriented netlist dialect.
//!
//! The first letter of an element name selects its kind:
//!
//! ```text
//! R1 a b 1k            resistor
//! L1 a b 10u [IC=1m]   inductor, optional initial current
//! C1 a b 2n [IC=0.5]   capacitor, optional initial voltage
//! V1 p n [DC] 1 | SIN(amp f [cycles [delay]]) | PULSE(v1 v2 delay rise fall width [period])
//!              | CHIRP(amp f0 f1 duration [delay]) | EXT   [AC mag]
//! E1 p n cp cn gain    voltage-controlled voltage source
//! F1 p n Vsense gain   current-controlled current source
//! T1 p1 n1 p2 n2 Z0=50 TD=5u
//! O1 p1 n1 p2 n2 R=0.12 L=184u C=46m LEN=2m N=32
//! XPZT e eref b bref f fref preset=tableI-stated
//! ```
//!
//! Directives are `.TRAN step stop`, `.AC start stop points [LIN|LOG]`,
//! `.PARAM name=value ...` and `.END`. A value may be written as `{name}` to
//! take a `.PARAM` value. Lines starting with `*` are comments, `;` starts a
//! comment anywhere, and a line starting with `+` continues the previous one.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::circuit::{add_piezo, validate, Circuit, Diagnostic, Element, ElementKind, Waveform};
use crate::piezo::PresetRegistry;
use crate::units::ValueLiteral;

/// 1-based line and column of a token, plus its length in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub line: usize,
    pub column: usize,
    pub len: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetlistErrorKind {
    #[error("unknown element kind {0:?}")]
    UnknownElementKind(String),
    #[error("duplicate element name {0:?}")]
    DuplicateName(String),
    #[error("unresolved node {0:?}")]
    UnresolvedNode(String),
    #[error("malformed value {0:?}")]
    MalformedValue(String),
    #[error("unknown directive {0:?}")]
    UnknownDirective(String),
    #[error("{0}")]
    Syntax(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("macro {name} needs {expected} nodes, got {got}")]
    PortArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("elaborated circuit is invalid: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("{0}")]
    Macro(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {span}: {kind}")]
pub struct NetlistError {
    pub kind: NetlistErrorKind,
    pub span: Span,
}

impl NetlistError {
    fn new(kind: NetlistErrorKind, span: Span) -> Self {
        Self { kind, span }
    }
}

/// A number or a `{name}` reference to a `.PARAM`.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Literal(ValueLiteral),
    Param(String),
}

impl Value {
    pub fn num(v: f64) -> Self {
        Value::Literal(ValueLiteral::plain(v))
    }

    fn resolve(&self, params: &HashMap<String, f64>, span: Span) -> Result<f64, NetlistError> {
        match self {
            Value::Literal(l) => Ok(l.value()),
            Value::Param(name) => {
                params
                    .get(&name.to_ascii_lowercase())
                    .copied()
                    .ok_or_else(|| {
                        NetlistError::new(NetlistErrorKind::UnknownParam(name.clone()), span)
                    })
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Literal(l) => write!(f, "{l}"),
            Value::Param(p) => write!(f, "{{{p}}}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Dc(Value),
    /// amplitude, frequency, then optional cycles and delay.
    Sin(Vec<Value>),
    /// v1 v2 delay rise fall width, then optional period.
    Pulse(Vec<Value>),
    /// amplitude f0 f1 duration, then optional delay.
    Chirp(Vec<Value>),
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Resistor(Value),
    Inductor {
        value: Value,
        initial: Option<Value>,
    },
    Capacitor {
        value: Value,
        initial: Option<Value>,
    },
    Source {
        spec: SourceSpec,
        ac: Option<Value>,
    },
    Vcvs {
        gain: Value,
    },
    Cccs {
        sensed: String,
        gain: Value,
    },
    Lossless {
        impedance: Value,
        delay: Value,
    },
    Lossy {
        r: Value,
        l: Value,
        c: Value,
        length: Value,
        segments: Value,
    },
    Macro {
        preset: String,
    },
}

impl Body {
    /// Node count the parser expects; macros accept any count here.
    fn node_count(letter: char) -> Option<usize> {
        match letter {
            'R' | 'L' | 'C' | 'V' | 'F' => Some(2),
            'E' | 'T' | 'O' => Some(4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementDecl {
    pub name: String,
    pub nodes: Vec<String>,
    pub body: Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepScale {
    Lin,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Tran {
        step: Value,
        stop: Value,
    },
    Ac {
        start: Value,
        stop: Value,
        points: Value,
        scale: SweepScale,
    },
    Param {
        name: String,
        value: Value,
    },
}

/// Parsed netlist. Equality ignores source spans.
#[derive(Debug, Clone, Default)]
pub struct NetlistDocument {
    pub elements: Vec<ElementDecl>,
    pub directives: Vec<Directive>,
    /// Span of each element's name token.
    pub element_spans: Vec<Span>,
    pub directive_spans: Vec<Span>,
}

impl PartialEq for NetlistDocument {
    fn eq(&self, other: &Self) -> bool {
        self.elements == other.elements && self.directives == other.directives
    }
}

impl NetlistDocument {
    pub fn push_element(&mut self, decl: ElementDecl) {
        self.elements.push(decl);
        self.element_spans.push(Span::default());
    }

    pub fn push_directive(&mut self, d: Directive) {
        self.directives.push(d);
        self.directive_spans.push(Span::default());
    }

    fn params(&self) -> Result<HashMap<String, f64>, NetlistError> {
        let mut out = HashMap::new();
        // parameters may refer to earlier parameters
        for (d, span) in self.directives.iter().zip(&self.directive_spans) {
            if let Directive::Param { name, value } = d {
                let v = value.resolve(&out, *span)?;
                out.insert(name.to_ascii_lowercase(), v);
            }
        }
        Ok(out)
    }

    /// Analyses requested by `.TRAN` and `.AC`, with parameters resolved.
    pub fn analyses(&self) -> Result<Analyses, NetlistError> {
        let params = self.params()?;
        let mut out = Analyses::default();
        for (d, &span) in self.directives.iter().zip(&self.directive_spans) {
            match d {
                Directive::Tran { step, stop } => {
                    out.tran = Some((step.resolve(&params, span)?, stop.resolve(&params, span)?));
                }
                Directive::Ac {
                    start,
                    stop,
                    points,
                    scale,
                } => {
                    let n = points.resolve(&params, span)?;
                    out.ac = Some(AcSpec {
                        start: start.resolve(&params, span)?,
                        stop: stop.resolve(&params, span)?,
                        points: whole(n, span)?,
                        scale: *scale,
                    });
                }
                Directive::Param { .. } => {}
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcSpec {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    pub scale: SweepScale,
}

impl AcSpec {
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.points.max(1);
        if n == 1 {
            return vec![self.start];
        }
        (0..n)
            .map(|k| {
                let u = k as f64 / (n - 1) as f64;
                match self.scale {
                    SweepScale::Lin => self.start + u * (self.stop - self.start),
                    SweepScale::Log => self.start * (self.stop / self.start).powf(u),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Analyses {
    /// `(step, stop)` in seconds.
    pub tran: Option<(f64, f64)>,
    pub ac: Option<AcSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    text: String,
    span: Span,
}

/// Splits text into logical lines of tokens, joining `+` continuations and
/// dropping comments.
fn tokenize(text: &str) -> Vec<Vec<Token>> {
    let mut lines: Vec<Vec<Token>> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let body = raw.split(';').next().unwrap_or("");
        let trimmed = body.trim_start();
        if trimmed.starts_with('*') {
            continue;
        }
        let mut tokens = Vec::new();
        let mut continuation = false;
        let chars: Vec<char> = body.chars().collect();
        let mut i = 0;
        let mut first = true;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() || c == ',' {
                i += 1;
                continue;
            }
            if first && c == '+' {
                continuation = true;
                first = false;
                i += 1;
                continue;
            }
            first = false;
            let start = i;
            if matches!(c, '(' | ')' | '=') {
                i += 1;
            } else {
                while i < chars.len()
                    && !chars[i].is_whitespace()
                    && !matches!(chars[i], '(' | ')' | '=' | ',')
                {
                    i += 1;
                }
            }
            tokens.push(Token {
                text: chars[start..i].iter().collect(),
                span: Span {
                    line: line_no,
                    column: start + 1,
                    len: i - start,
                },
            });
        }
        if continuation {
            if let Some(prev) = lines.last_mut() {
                prev.extend(tokens);
                continue;
            }
        }
        if !tokens.is_empty() {
            lines.push(tokens);
        }
    }
    lines
}

struct Cursor<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        self.pos += usize::from(t.is_some());
        t
    }

    fn last_span(&self) -> Span {
        self.tokens
            .get(self.pos.min(self.tokens.len()).saturating_sub(1))
            .map(|t| t.span)
            .unwrap_or_default()
    }

    fn expect(&mut self, what: &str) -> Result<&'a Token, NetlistError> {
        let span = self.last_span();
        self.next().ok_or_else(|| {
            NetlistError::new(NetlistErrorKind::Syntax(format!("expected {what}")), span)
        })
    }

    fn value(&mut self, what: &str) -> Result<Value, NetlistError> {
        let t = self.expect(what)?;
        parse_value_token(t)
    }

    fn done(&self) -> Result<(), NetlistError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(NetlistError::new(
                NetlistErrorKind::Syntax(format!("unexpected {:?}", t.text)),
                t.span,
            )),
        }
    }

    /// `key = value` pairs until the end of the line.
    fn keyed(&mut self) -> Result<Vec<(String, &'a Token)>, NetlistError> {
        let mut out = Vec::new();
        while let Some(k) = self.next() {
            let eq = self.expect("'='")?;
            if eq.text != "=" {
                return Err(NetlistError::new(
                    NetlistErrorKind::Syntax(format!("expected '=' after {:?}", k.text)),
                    eq.span,
                ));
            }
            let v = self.expect("a value")?;
            out.push((k.text.to_ascii_uppercase(), v));
        }
        Ok(out)
    }
}

fn parse_value_token(t: &Token) -> Result<Value, NetlistError> {
    let s = t.text.as_str();
    if let Some(inner) = s.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
        if is_identifier(inner) {
            return Ok(Value::Param(inner.to_string()));
        }
    }
    ValueLiteral::parse(s)
        .map(Value::Literal)
        .map_err(|_| NetlistError::new(NetlistErrorKind::MalformedValue(s.to_string()), t.span))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

fn is_node_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| !c.is_whitespace() && !matches!(c, '(' | ')' | '=' | '{' | '}' | ',' | ';'))
}

/// Parses a netlist. Parsing stops at `.END`.
pub fn parse(text: &str) -> Result<NetlistDocument, NetlistError> {
    let mut doc = NetlistDocument::default();
    let mut names: HashSet<String> = HashSet::new();
    for line in tokenize(text) {
        let head = &line[0];
        if head.text.starts_with('.') {
            let word = head.text.to_ascii_uppercase();
            if word == ".END" {
                break;
            }
            parse_directive(&word, head, &line[1..], &mut doc)?;
            continue;
        }
        let decl = parse_element(&line)?;
        if !names.insert(decl.name.to_ascii_lowercase()) {
            return Err(NetlistError::new(
                NetlistErrorKind::DuplicateName(decl.name),
                head.span,
            ));
        }
        doc.elements.push(decl);
        doc.element_spans.push(head.span);
    }
    check_references(&doc)?;
    Ok(doc)
}

fn parse_directive(
    word: &str,
    head: &Token,
    rest: &[Token],
    doc: &mut NetlistDocument,
) -> Result<(), NetlistError> {
    let mut cur = Cursor {
        tokens: rest,
        pos: 0,
    };
    match word {
        ".TRAN" => {
            let step = cur.value("a time step")?;
            let stop = cur.value("a stop time")?;
            cur.done()?;
            doc.directives.push(Directive::Tran { step, stop });
            doc.directive_spans.push(head.span);
        }
        ".AC" => {
            let start = cur.value("a start frequency")?;
            let stop = cur.value("a stop frequency")?;
            let points = cur.value("a point count")?;
            let scale = match cur.next() {
                None => SweepScale::Lin,
                Some(t) => match t.text.to_ascii_uppercase().as_str() {
                    "LIN" => SweepScale::Lin,
                    "LOG" => SweepScale::Log,
                    _ => {
                        return Err(NetlistError::new(
                            NetlistErrorKind::Syntax(format!(
                                "expected LIN or LOG, found {:?}",
                                t.text
                            )),
                            t.span,
                        ))
                    }
                },
            };
            cur.done()?;
            doc.directives.push(Directive::Ac {
                start,
                stop,
                points,
                scale,
            });
            doc.directive_spans.push(head.span);
        }
        ".PARAM" => {
            if rest.is_empty() {
                return Err(NetlistError::new(
                    NetlistErrorKind::Syntax("expected name=value".into()),
                    head.span,
                ));
            }
            for (key, tok) in cur.keyed()? {
                let name = rest
                    .iter()
                    .find(|t| t.text.eq_ignore_ascii_case(&key))
                    .map_or(key.clone(), |t| t.text.clone());
                if !is_identifier(&name) {
                    return Err(NetlistError::new(
                        NetlistErrorKind::Syntax(format!("bad parameter name {name:?}")),
                        tok.span,
                    ));
                }
                doc.directives.push(Directive::Param {
                    name,
                    value: parse_value_token(tok)?,
                });
                doc.directive_spans.push(tok.span);
            }
        }
        _ => {
            return Err(NetlistError::new(
                NetlistErrorKind::UnknownDirective(head.text.clone()),
                head.span,
            ))
        }
    }
    Ok(())
}

fn parse_element(line: &[Token]) -> Result<ElementDecl, NetlistError> {
    let head = &line[0];
    let name = head.text.clone();
    let letter = name
        .chars()
        .next()
        .map(|c| c.to_ascii_uppercase())
        .unwrap_or(' ');
    if !"RLCVEFTOX".contains(letter) || !is_node_name(&name) {
        return Err(NetlistError::new(
            NetlistErrorKind::UnknownElementKind(name),
            head.span,
        ));
    }
    let mut cur = Cursor {
        tokens: &line[1..],
        pos: 0,
    };
    let node = |cur: &mut Cursor| -> Result<String, NetlistError> {
        let t = cur.expect("a node name")?;
        if is_node_name(&t.text) {
            Ok(t.text.clone())
        } else {
            Err(NetlistError::new(
                NetlistErrorKind::UnresolvedNode(t.text.clone()),
                t.span,
            ))
        }
    };
    let mut nodes = Vec::new();
    if let Some(n) = Body::node_count(letter) {
        for _ in 0..n {
            nodes.push(node(&mut cur)?);
        }
    } else {
        while cur
            .peek()
            .is_some_and(|_| cur.tokens.get(cur.pos + 1).is_none_or(|n| n.text != "="))
        {
            nodes.push(node(&mut cur)?);
        }
    }
    let body = match letter {
        'R' => {
            let v = cur.value("a resistance")?;
            cur.done()?;
            Body::Resistor(v)
        }
        'L' | 'C' => {
            let value = cur.value("a value")?;
            let mut initial = None;
            for (k, tok) in cur.keyed()? {
                if k != "IC" {
                    return Err(unknown_key(&k, tok));
                }
                initial = Some(parse_value_token(tok)?);
            }
            if letter == 'L' {
                Body::Inductor { value, initial }
            } else {
                Body::Capacitor { value, initial }
            }
        }
        'V' => parse_source(&mut cur)?,
        'E' => {
            let gain = cur.value("a gain")?;
            cur.done()?;
            Body::Vcvs { gain }
        }
        'F' => {
            let sensed = cur.expect("a sensed source name")?.text.clone();
            let gain = cur.value("a gain")?;
            cur.done()?;
            Body::Cccs { sensed, gain }
        }
        'T' => {
            let mut kv = keyed_map(&mut cur, &["Z0", "TD"])?;
            Body::Lossless {
                impedance: take(&mut kv, "Z0", head)?,
                delay: take(&mut kv, "TD", head)?,
            }
        }
        'O' => {
            let mut kv = keyed_map(&mut cur, &["R", "L", "C", "LEN", "N"])?;
            Body::Lossy {
                r: take(&mut kv, "R", head)?,
                l: take(&mut kv, "L", head)?,
                c: take(&mut kv, "C", head)?,
                length: take(&mut kv, "LEN", head)?,
                segments: take(&mut kv, "N", head)?,
            }
        }
        'X' => {
            let mut preset = None;
            for (k, tok) in cur.keyed()? {
                if k != "PRESET" {
                    return Err(unknown_key(&k, tok));
                }
                preset = Some(tok.text.clone());
            }
            let preset = preset.ok_or_else(|| {
                NetlistError::new(
                    NetlistErrorKind::Syntax("macro needs preset=<name>".into()),
                    head.span,
                )
            })?;
            Body::Macro { preset }
        }
        _ => unreachable!("kind letter checked above"),
    };
    Ok(ElementDecl { name, nodes, body })
}

fn unknown_key(k: &str, tok: &Token) -> NetlistError {
    NetlistError::new(
        NetlistErrorKind::Syntax(format!("unknown argument {k:?}")),
        tok.span,
    )
}

fn keyed_map(
    cur: &mut Cursor,
    allowed: &[&str],
) -> Result<HashMap<String, (Value, Span)>, NetlistError> {
    let mut out = HashMap::new();
    for (k, tok) in cur.keyed()? {
        if !allowed.contains(&k.as_str()) {
            return Err(unknown_key(&k, tok));
        }
        out.insert(k, (parse_value_token(tok)?, tok.span));
    }
    Ok(out)
}

fn take(
    kv: &mut HashMap<String, (Value, Span)>,
    key: &str,
    head: &Token,
) -> Result<Value, NetlistError> {
    kv.remove(key).map(|(v, _)| v).ok_or_else(|| {
        NetlistError::new(
            NetlistErrorKind::Syntax(format!("missing {key}=")),
            head.span,
        )
    })
}

fn parse_source(cur: &mut Cursor) -> Result<Body, NetlistError> {
    let mut spec = None;
    let mut ac = None;
    while let Some(t) = cur.next() {
        let word = t.text.to_ascii_uppercase();
        match word.as_str() {
            "DC" => spec = Some(SourceSpec::Dc(cur.value("a DC level")?)),
            "AC" => ac = Some(cur.value("an AC magnitude")?),
            "EXT" => spec = Some(SourceSpec::External),
            "SIN" | "PULSE" | "CHIRP" => {
                let (min, max) = match word.as_str() {
                    "SIN" => (2, 4),
                    "PULSE" => (6, 7),
                    _ => (4, 5),
                };
                let open = cur.expect("'('")?;
                if open.text != "(" {
                    return Err(NetlistError::new(
                        NetlistErrorKind::Syntax(format!("expected '(' after {word}")),
                        open.span,
                    ));
                }
                let mut args = Vec::new();
                loop {
                    let a = cur.expect("')'")?;
                    if a.text == ")" {
                        break;
                    }
                    args.push(parse_value_token(a)?);
                }
                if args.len() < min || args.len() > max {
                    return Err(NetlistError::new(
                        NetlistErrorKind::Syntax(format!(
                            "{word} takes {min} to {max} arguments, got {}",
                            args.len()
                        )),
                        t.span,
                    ));
                }
                spec = Some(match word.as_str() {
                    "SIN" => SourceSpec::Sin(args),
                    "PULSE" => SourceSpec::Pulse(args),
                    _ => SourceSpec::Chirp(args),
                });
            }
            _ => {
                if spec.is_some() {
                    return Err(NetlistError::new(
                        NetlistErrorKind::Syntax(format!("unexpected {:?}", t.text)),
                        t.span,
                    ));
                }
                spec = Some(SourceSpec::Dc(parse_value_token(t)?));
            }
        }
    }
    Ok(Body::Source {
        spec: spec.unwrap_or(SourceSpec::Dc(Value::num(0.0))),
        ac,
    })
}

/// Controlling nodes of E elements must be connected somewhere, and F
/// elements must sense a declared V element.
fn check_references(doc: &NetlistDocument) -> Result<(), NetlistError> {
    let mut connected: HashSet<String> = HashSet::new();
    connected.insert("0".into());
    connected.insert("gnd".into());
    for e in &doc.elements {
        let terminals = match e.body {
            Body::Vcvs { .. } => &e.nodes[..2],
            _ => &e.nodes[..],
        };
        connected.extend(terminals.iter().map(|n| n.to_string()));
    }
    let sources: HashSet<String> = doc
        .elements
        .iter()
        .filter(|e| matches!(e.body, Body::Source { .. }))
        .map(|e| e.name.to_ascii_lowercase())
        .collect();
    for (e, &span) in doc.elements.iter().zip(&doc.element_spans) {
        match &e.body {
            Body::Vcvs { .. } => {
                if let Some(n) = e.nodes[2..].iter().find(|n| !connected.contains(*n)) {
                    return Err(NetlistError::new(
                        NetlistErrorKind::UnresolvedNode(n.clone()),
                        span,
                    ));
                }
            }
            Body::Cccs { sensed, .. } => {
                if !sources.contains(&sensed.to_ascii_lowercase()) {
                    return Err(NetlistError::new(
                        NetlistErrorKind::UnresolvedNode(sensed.clone()),
                        span,
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Canonical text form; `parse(serialize(doc)) == doc`.
pub fn serialize(doc: &NetlistDocument) -> String {
    let mut out = String::new();
    for e in &doc.elements {
        out.push_str(&e.name);
        for n in &e.nodes {
            out.push(' ');
            out.push_str(n);
        }
        let join = |v: &[Value]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let tail = match &e.body {
            Body::Resistor(v) => format!("{v}"),
            Body::Inductor { value, initial } | Body::Capacitor { value, initial } => match initial
            {
                Some(ic) => format!("{value} IC={ic}"),
                None => format!("{value}"),
            },
            Body::Source { spec, ac } => {
                let s = match spec {
                    SourceSpec::Dc(v) => format!("DC {v}"),
                    SourceSpec::Sin(a) => format!("SIN({})", join(a)),
                    SourceSpec::Pulse(a) => format!("PULSE({})", join(a)),
                    SourceSpec::Chirp(a) => format!("CHIRP({})", join(a)),
                    SourceSpec::External => "EXT".to_string(),
                };
                match ac {
                    Some(m) => format!("{s} AC {m}"),
                    None => s,
                }
            }
            Body::Vcvs { gain } => format!("{gain}"),
            Body::Cccs { sensed, gain } => format!("{sensed} {gain}"),
            Body::Lossless { impedance, delay } => format!("Z0={impedance} TD={delay}"),
            Body::Lossy {
                r,
                l,
                c,
                length,
                segments,
            } => format!("R={r} L={l} C={c} LEN={length} N={segments}"),
            Body::Macro { preset } => format!("preset={preset}"),
        };
        out.push(' ');
        out.push_str(&tail);
        out.push('\n');
    }
    for d in &doc.directives {
        match d {
            Directive::Tran { step, stop } => out.push_str(&format!(".TRAN {step} {stop}\n")),
            Directive::Ac {
                start,
                stop,
                points,
                scale,
            } => {
                let s = match scale {
                    SweepScale::Lin => "LIN",
                    SweepScale::Log => "LOG",
                };
                out.push_str(&format!(".AC {start} {stop} {points} {s}\n"));
            }
            Directive::Param { name, value } => out.push_str(&format!(".PARAM {name}={value}\n")),
        }
    }
    out.push_str(".END\n");
    out
}

fn whole(v: f64, span: Span) -> Result<usize, NetlistError> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(NetlistError::new(
            NetlistErrorKind::MalformedValue(format!("{v} is not a whole count")),
            span,
        ))
    }
}

/// Number of nodes the piezo macro takes: electrical, back and front ports,
/// each as a (terminal, reference) pair.
pub const MACRO_PORTS: usize = 6;

/// Builds the circuit: parameters substituted, macros expanded into
/// primitives named `<macro>.<element>`, and the result validated.
pub fn elaborate(
    doc: &NetlistDocument,
    registry: &PresetRegistry,
) -> Result<Circuit, NetlistError> {
    let params = doc.params()?;
    let mut c = Circuit::new();
    for (e, &span) in doc.elements.iter().zip(&doc.element_spans) {
        let val = |v: &Value| v.resolve(&params, span);
        let n: Vec<usize> = if matches!(e.body, Body::Macro { .. }) {
            Vec::new()
        } else {
            e.nodes.iter().map(|x| c.node(x)).collect()
        };
        let kind = match &e.body {
            Body::Resistor(v) => ElementKind::Resistor {
                a: n[0],
                b: n[1],
                ohms: val(v)?,
            },
            Body::Inductor { value, initial } => ElementKind::Inductor {
                a: n[0],
                b: n[1],
                henries: val(value)?,
                initial_current: initial.as_ref().map(val).transpose()?.unwrap_or(0.0),
            },
            Body::Capacitor { value, initial } => ElementKind::Capacitor {
                a: n[0],
                b: n[1],
                farads: val(value)?,
                initial_voltage: initial.as_ref().map(val).transpose()?.unwrap_or(0.0),
            },
            Body::Source { spec, ac } => ElementKind::VoltageSource {
                pos: n[0],
                neg: n[1],
                waveform: waveform(spec, &params, span)?,
                ac: ac.as_ref().map(val).transpose()?,
            },
            Body::Vcvs { gain } => ElementKind::Vcvs {
                pos: n[0],
                neg: n[1],
                ctrl_pos: n[2],
                ctrl_neg: n[3],
                gain: val(gain)?,
            },
            Body::Cccs { sensed, gain } => ElementKind::Cccs {
                pos: n[0],
                neg: n[1],
                sensed: sensed.clone(),
                gain: val(gain)?,
            },
            Body::Lossless { impedance, delay } => ElementKind::LosslessLine {
                p1: n[0],
                n1: n[1],
                p2: n[2],
                n2: n[3],
                impedance: val(impedance)?,
                delay: val(delay)?,
            },
            Body::Lossy {
                r,
                l,
                c: cap,
                length,
                segments,
            } => ElementKind::LossyLine {
                p1: n[0],
                n1: n[1],
                p2: n[2],
                n2: n[3],
                r_per_m: val(r)?,
                l_per_m: val(l)?,
                c_per_m: val(cap)?,
                length: val(length)?,
                segments: whole(val(segments)?, span)?,
            },
            Body::Macro { preset } => {
                if e.nodes.len() != MACRO_PORTS {
                    return Err(NetlistError::new(
                        NetlistErrorKind::PortArityMismatch {
                            name: e.name.clone(),
                            expected: MACRO_PORTS,
                            got: e.nodes.len(),
                        },
                        span,
                    ));
                }
                let p = registry.transducer(preset).map_err(|_| {
                    NetlistError::new(NetlistErrorKind::UnknownPreset(preset.clone()), span)
                })?;
                let nd = &e.nodes;
                add_piezo(
                    &mut c,
                    &e.name,
                    &p,
                    (&nd[0], &nd[1]),
                    (&nd[2], &nd[3]),
                    (&nd[4], &nd[5]),
                )
                .map_err(|err| NetlistError::new(NetlistErrorKind::Macro(err.to_string()), span))?;
                continue;
            }
        };
        c.add(Element::new(e.name.clone(), kind));
    }
    let diagnostics = validate(&c);
    if !diagnostics.is_empty() {
        let span = doc.element_spans.first().copied().unwrap_or_default();
        return Err(NetlistError::new(
            NetlistErrorKind::Invalid(diagnostics),
            span,
        ));
    }
    Ok(c)
}

fn waveform(
    spec: &SourceSpec,
    params: &HashMap<String, f64>,
    span: Span,
) -> Result<Waveform, NetlistError> {
    let vals = |a: &[Value]| -> Result<Vec<f64>, NetlistError> {
        a.iter().map(|v| v.resolve(params, span)).collect()
    };
    Ok(match spec {
        SourceSpec::Dc(v) => Waveform::Dc(v.resolve(params, span)?),
        SourceSpec::External => Waveform::External,
        SourceSpec::Sin(a) => {
            let v = vals(a)?;
            let cycles = match v.get(2) {
                Some(&n) if n > 0.0 => Some(whole(n, span)? as u32),
                _ => None,
            };
            Waveform::SineBurst {
                amplitude: v[0],
                frequency: v[1],
                cycles,
                start: v.get(3).copied().unwrap_or(0.0),
            }
        }
        SourceSpec::Pulse(a) => {
            let v = vals(a)?;
            Waveform::Pulse {
                v1: v[0],
                v2: v[1],
                delay: v[2],
                rise: v[3],
                fall: v[4],
                width: v[5],
                period: v.get(6).copied(),
            }
        }
        SourceSpec::Chirp(a) => {
            let v = vals(a)?;
            Waveform::Chirp {
                amplitude: v[0],
                f0: v[1],
                f1: v[2],
                duration: v[3],
                start: v.get(4).copied().unwrap_or(0.0),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_kind(text: &str) -> NetlistErrorKind {
        parse(text).unwrap_err().kind
    }

    #[test]
    fn capacitor_line() {
        let doc = parse("C1 1 0 2n\n").unwrap();
        assert_eq!(doc.elements.len(), 1);
        let e = &doc.elements[0];
        assert_eq!(e.nodes, ["1", "0"]);
        let Body::Capacitor { value, initial } = &e.body else {
            panic!("not a capacitor")
        };
        assert!(initial.is_none());
        let Value::Literal(l) = value else {
            panic!("not a literal")
        };
        assert_eq!(l.value(), 2.0 * 1e-9);
    }

    #[test]
    fn unknown_kind_has_span() {
        let e = parse("R1 1 0 1k\n  Q1 1 0 5\n").unwrap_err();
        assert_eq!(e.kind, NetlistErrorKind::UnknownElementKind("Q1".into()));
        assert_eq!(
            e.span,
            Span {
                line: 2,
                column: 3,
                len: 2
            }
        );
    }

    #[test]
    fn error_kinds() {
        assert!(matches!(
            err_kind("R1 a 0 1\nr1 b 0 2\n"),
            NetlistErrorKind::DuplicateName(_)
        ));
        assert!(matches!(
            err_kind("R1 a 0 1x2\n"),
            NetlistErrorKind::MalformedValue(_)
        ));
        assert!(matches!(
            err_kind(".OPTIONS foo\n"),
            NetlistErrorKind::UnknownDirective(_)
        ));
        assert!(matches!(
            err_kind("R1 a 0 1\nE1 b 0 nowhere 0 2\n"),
            NetlistErrorKind::UnresolvedNode(_)
        ));
        assert!(matches!(
            err_kind("R1 a 0 1\nF1 a 0 VX 2\n"),
            NetlistErrorKind::UnresolvedNode(_)
        ));
    }

    #[test]
    fn comments_continuations_and_end() {
        let text = "* title\nV1 in 0 SIN(0 ; amplitude\n+ 1k 10)\nR1 in 0 {r} ; load\n.PARAM r=2k\n.END\nQ9 junk\n";
        let doc = parse(text).unwrap();
        assert_eq!(doc.elements.len(), 2);
        let Body::Source {
            spec: SourceSpec::Sin(a),
            ..
        } = &doc.elements[0].body
        else {
            panic!("expected a sine source")
        };
        assert_eq!(a.len(), 3);
        let c = elaborate(&doc, &PresetRegistry::builtin()).unwrap();
        let ElementKind::Resistor { ohms, .. } = c.element("R1").unwrap().kind else {
            panic!()
        };
        assert_eq!(ohms, 2000.0);
    }

    #[test]
    fn analyses_resolve() {
        let doc = parse("R1 a 0 1\nV1 a 0 1\n.TRAN 1n 10u\n.AC 1k 1meg 7 LOG\n").unwrap();
        let a = doc.analyses().unwrap();
        assert_eq!(a.tran, Some((1e-9, 10.0 * 1e-6)));
        let ac = a.ac.unwrap();
        assert_eq!(ac.points, 7);
        let f = ac.frequencies();
        assert!((f[3] - 31622.776601683792).abs() < 1e-6);
    }

    #[test]
    fn macro_expansion_counts() {
        let doc = parse("XPZT e 0 b 0 f 0 preset=tableI\nR1 e 0 1\n").unwrap();
        let c = elaborate(&doc, &PresetRegistry::builtin()).unwrap();
        let count = |letter: char| {
            c.elements()
                .iter()
                .filter(|e| e.name.starts_with("XPZT.") && e.kind.letter() == letter)
                .count()
        };
        assert_eq!(count('T'), 1);
        assert_eq!(count('C'), 2);
        assert_eq!(count('V'), 2);
        assert_eq!(count('F'), 2);
        assert_eq!(count('E'), 1);
        assert_eq!(count('R'), 1);
    }

    #[test]
    fn macro_errors() {
        let reg = PresetRegistry::builtin();
        let doc = parse("XPZT e 0 b 0 f 0 preset=nosuch\n").unwrap();
        assert!(matches!(
            elaborate(&doc, &reg).unwrap_err().kind,
            NetlistErrorKind::UnknownPreset(_)
        ));
        let doc = parse("XPZT e 0 b 0 preset=tableI\n").unwrap();
        assert!(matches!(
            elaborate(&doc, &reg).unwrap_err().kind,
            NetlistErrorKind::PortArityMismatch {
                expected: 6,
                got: 4,
                ..
            }
        ));
    }

    #[test]
    fn serialize_fixpoint_on_every_kind() {
        let text = "\
V1 in 0 PULSE(0 1 0 1n 1n 5u 20u) AC 1
V2 x 0 CHIRP(1 216k 264k 1m)
V3 y 0 EXT
R1 in a 50
L1 a b 10u IC=1m
C1 b 0 2.5nF
E1 c 0 b 0 2
F1 c 0 V1 0.5
T1 a 0 c 0 Z0=50 TD=5u
O1 c 0 d 0 R=0.1232 L=184.8u C=46m LEN=2m N=32
R2 d 0 {rl}
R3 x 0 1
R4 y 0 1
.PARAM rl=1meg
.TRAN 1n 1m
.AC 1k 10k 11 LIN
";
        let doc = parse(text).unwrap();
        let again = parse(&serialize(&doc)).unwrap();
        assert_eq!(doc, again);
        assert_eq!(serialize(&doc), serialize(&again));
    }
}
