use echolab::circuit::ElementKind;
use echolab::netlist::{
    elaborate, parse, serialize, Body, Directive, ElementDecl, NetlistDocument, NetlistErrorKind,
    SourceSpec, SweepScale, Value,
};
use echolab::piezo::{PresetRegistry, TransducerParams};
use echolab::units::{Suffix, ValueLiteral};
use proptest::prelude::*;

const SUFFIXES: [(&str, f64); 7] = [
    ("p", 1e-12),
    ("n", 1e-9),
    ("u", 1e-6),
    ("m", 1e-3),
    ("k", 1e3),
    ("meg", 1e6),
    ("g", 1e9),
];

fn resistor_value(text: &str) -> f64 {
    let doc = parse(text).unwrap();
    match &doc.elements[0].body {
        Body::Resistor(Value::Literal(l)) => l.value(),
        other => panic!("expected a literal resistor, got {other:?}"),
    }
}

#[test]
fn suffix_table_through_the_parser() {
    for (s, mult) in SUFFIXES {
        for text in [s.to_string(), s.to_ascii_uppercase()] {
            assert_eq!(
                resistor_value(&format!("R1 1 0 1{text}")),
                mult,
                "suffix {text}"
            );
        }
    }
    assert_ne!(resistor_value("R1 1 0 1m"), resistor_value("R1 1 0 1meg"));
}

#[test]
fn document_without_macros_keeps_its_elements() {
    let text = "V1 in 0 DC 1\nR1 in out 1k\nC1 out 0 1n\nL1 out x 1u\nR2 x 0 10\n";
    let c = elaborate(&parse(text).unwrap(), &PresetRegistry::builtin()).unwrap();
    let mut letters: Vec<(String, char)> = c
        .elements()
        .iter()
        .map(|e| (e.name.clone(), e.kind.letter()))
        .collect();
    letters.sort();
    assert_eq!(
        letters,
        [
            ("C1".to_string(), 'C'),
            ("L1".into(), 'L'),
            ("R1".into(), 'R'),
            ("R2".into(), 'R'),
            ("V1".into(), 'V')
        ]
    );
}

#[test]
fn macro_expands_to_the_leach_element_set() {
    let doc = parse("XPZT e 0 b 0 f 0 preset=tableI\nRL e 0 1meg\n").unwrap();
    let c = elaborate(&doc, &PresetRegistry::builtin()).unwrap();
    let params = TransducerParams::table_i_stated();
    let inner: Vec<_> = c
        .elements()
        .iter()
        .filter(|e| e.name.starts_with("XPZT."))
        .collect();
    assert_eq!(inner.len(), 9);

    let mut lines = 0;
    let mut ammeters = 0;
    let mut cccs_gains = Vec::new();
    let mut vcvs = 0;
    let mut caps = Vec::new();
    let mut resistors = Vec::new();
    for e in &inner {
        match &e.kind {
            ElementKind::LosslessLine {
                impedance, delay, ..
            } => {
                lines += 1;
                assert_eq!(*impedance, params.zc);
                assert_eq!(*delay, params.tau_c);
            }
            ElementKind::VoltageSource { waveform, .. } => {
                assert_eq!(waveform.value_at(1e-6), 0.0);
                ammeters += 1;
            }
            ElementKind::Cccs { gain, .. } => cccs_gains.push(gain.abs()),
            ElementKind::Vcvs { .. } => vcvs += 1,
            ElementKind::Capacitor { farads, .. } => caps.push(*farads),
            ElementKind::Resistor { ohms, .. } => resistors.push(*ohms),
            other => panic!("unexpected element {other:?}"),
        }
    }
    assert_eq!((lines, ammeters, vcvs), (1, 2, 1));
    cccs_gains.sort_by(f64::total_cmp);
    let mut expected = [params.h * params.c0, params.h];
    expected.sort_by(f64::total_cmp);
    assert_eq!(cccs_gains, expected);
    caps.sort_by(f64::total_cmp);
    assert_eq!(caps, [params.c0, 1.0]);
    assert_eq!(resistors, [1e3]);
}

#[test]
fn errors_point_inside_the_text() {
    let cases = [
        "R1 a 0 1\nQ1 1 0 5\n",
        "R1 a 0 1\nR1 b 0 2\n",
        "R1 a 0 1\nE1 b 0 zz 0 1\n",
        "R1 a 0 1.2.3\n",
        "R1 a 0 1\n.FOUR 1k v(a)\n",
        "V1 a 0 SIN(1 2\n",
        "R1 a 0 {nope}\n",
    ];
    for text in cases {
        let err = match parse(text) {
            Err(e) => e,
            Ok(doc) => elaborate(&doc, &PresetRegistry::builtin()).unwrap_err(),
        };
        let line = text.lines().nth(err.span.line - 1).expect("line in range");
        assert!(
            err.span.column >= 1 && err.span.column - 1 + err.span.len <= line.len(),
            "{text:?}: span {:?} outside {line:?}",
            err.span
        );
    }
}

#[test]
fn error_kinds_match_the_fault() {
    let kind = |t: &str| parse(t).unwrap_err().kind;
    assert!(matches!(
        kind("Q1 1 0 5"),
        NetlistErrorKind::UnknownElementKind(_)
    ));
    assert!(matches!(
        kind("R1 a 0 1\nr1 b 0 1"),
        NetlistErrorKind::DuplicateName(_)
    ));
    assert!(matches!(
        kind("R1 a 0 abc"),
        NetlistErrorKind::MalformedValue(_)
    ));
    assert!(matches!(
        kind(".DC V1 0 1 0.1"),
        NetlistErrorKind::UnknownDirective(_)
    ));
    assert!(matches!(
        kind("R1 a 0 1\nE1 b 0 c 0 1"),
        NetlistErrorKind::UnresolvedNode(_)
    ));
}

#[test]
fn unknown_preset_is_reported() {
    let doc = parse("XPZT e 0 b 0 f 0 preset=nosuch").unwrap();
    let err = elaborate(&doc, &PresetRegistry::builtin()).unwrap_err();
    assert_eq!(err.kind, NetlistErrorKind::UnknownPreset("nosuch".into()));
}

// Units that cannot be mistaken for a scale suffix.
const UNITS: [&str; 5] = ["F", "H", "Ohm", "V", "s"];

fn literal() -> impl Strategy<Value = Value> {
    (
        -1e6f64..1e6,
        proptest::option::of(0usize..7),
        proptest::option::of(0usize..UNITS.len()),
    )
        .prop_map(|(m, s, u)| {
            Value::Literal(ValueLiteral {
                magnitude: m,
                suffix: s.map(|k| Suffix::ALL[k]),
                unit: u.map(|k| UNITS[k].to_string()),
            })
        })
}

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        4 => literal(),
        1 => "[a-z][a-z0-9_]{0,5}".prop_map(Value::Param),
    ]
}

fn node() -> impl Strategy<Value = String> {
    prop_oneof![Just("0".to_string()), "[a-z][a-z0-9]{0,3}"]
}

fn body() -> impl Strategy<Value = Body> {
    prop_oneof![
        value().prop_map(Body::Resistor),
        (value(), proptest::option::of(value()))
            .prop_map(|(value, initial)| Body::Capacitor { value, initial }),
        (value(), proptest::option::of(value()))
            .prop_map(|(value, initial)| Body::Inductor { value, initial }),
        (
            prop_oneof![
                value().prop_map(SourceSpec::Dc),
                proptest::collection::vec(value(), 2..=4).prop_map(SourceSpec::Sin),
                proptest::collection::vec(value(), 6..=7).prop_map(SourceSpec::Pulse),
                proptest::collection::vec(value(), 4..=5).prop_map(SourceSpec::Chirp),
                Just(SourceSpec::External),
            ],
            proptest::option::of(value())
        )
            .prop_map(|(spec, ac)| Body::Source { spec, ac }),
        (value(), value()).prop_map(|(impedance, delay)| Body::Lossless { impedance, delay }),
        (value(), value(), value(), value(), value()).prop_map(|(r, l, c, length, segments)| {
            Body::Lossy {
                r,
                l,
                c,
                length,
                segments,
            }
        }),
    ]
}

fn letter(b: &Body) -> char {
    match b {
        Body::Resistor(_) => 'R',
        Body::Capacitor { .. } => 'C',
        Body::Inductor { .. } => 'L',
        Body::Source { .. } => 'V',
        Body::Lossless { .. } => 'T',
        Body::Lossy { .. } => 'O',
        _ => unreachable!("not generated"),
    }
}

fn document() -> impl Strategy<Value = NetlistDocument> {
    let elements = proptest::collection::vec((body(), proptest::collection::vec(node(), 4)), 1..8);
    let directives = proptest::collection::vec(
        prop_oneof![
            (value(), value()).prop_map(|(step, stop)| Directive::Tran { step, stop }),
            (value(), value(), value(), any::<bool>()).prop_map(|(start, stop, points, log)| {
                Directive::Ac {
                    start,
                    stop,
                    points,
                    scale: if log {
                        SweepScale::Log
                    } else {
                        SweepScale::Lin
                    },
                }
            }),
            ("[a-z][a-z0-9_]{0,5}", value())
                .prop_map(|(name, value)| Directive::Param { name, value }),
        ],
        0..4,
    );
    (elements, directives).prop_map(|(elements, directives)| {
        let mut doc = NetlistDocument::default();
        for (k, (body, nodes)) in elements.into_iter().enumerate() {
            let count = match body {
                Body::Lossless { .. } | Body::Lossy { .. } => 4,
                _ => 2,
            };
            doc.push_element(ElementDecl {
                name: format!("{}{}", letter(&body), k + 1),
                nodes: nodes[..count].to_vec(),
                body,
            });
        }
        for d in directives {
            doc.push_directive(d);
        }
        doc
    })
}

proptest! {
    #[test]
    fn parse_serialize_parse_is_a_fixpoint(doc in document()) {
        let text = serialize(&doc);
        let once = parse(&text).unwrap();
        prop_assert_eq!(&once, &doc);
        let twice = parse(&serialize(&once)).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn suffix_scaling_is_exact(m in 1u32..1000, k in 0usize..7) {
        let (s, mult) = SUFFIXES[k];
        let v = resistor_value(&format!("R1 1 0 {m}{s}"));
        prop_assert_eq!(v, m as f64 * mult);
    }
}
