use std::f64::consts::PI;

use echolab::circuit::{assemble_ac, solve_ac, validate, Element, ElementKind, Waveform};
use echolab::piezo::TransducerParams;
use echolab::Circuit;
use num_complex::Complex64;
use proptest::prelude::*;

/// A source driving a random connected network of resistors, capacitors and
/// inductors. Node `n{k}` is joined to an earlier node so every node has a
/// path to the source.
fn network() -> impl Strategy<Value = Vec<(u8, usize, usize, f64)>> {
    (2usize..7).prop_flat_map(|nodes| {
        let tree = (1..nodes)
            .map(|k| (0u8..3, 0..k, Just(k), 1.0f64..1e3))
            .collect::<Vec<_>>();
        let extra = proptest::collection::vec((0u8..3, 0..nodes, 0..nodes, 1.0f64..1e3), 0..6);
        (tree, extra).prop_map(|(mut t, e)| {
            t.extend(e.into_iter().filter(|(_, a, b, _)| a != b));
            t
        })
    })
}

fn build(parts: &[(u8, usize, usize, f64)], order: &[usize]) -> Circuit {
    let mut c = Circuit::new();
    c.vsource("VS", "n0", "0", Waveform::sine(1.0, 1e3));
    c.resistor("RG", "n0", "0", 50.0);
    for &k in order {
        let (kind, a, b, v) = parts[k];
        let (a, b) = (format!("n{a}"), format!("n{b}"));
        let name = format!("X{k}");
        match kind {
            0 => c.resistor(&format!("R{name}"), &a, &b, v),
            1 => c.capacitor(&format!("C{name}"), &a, &b, v * 1e-9),
            _ => c.inductor(&format!("L{name}"), &a, &b, v * 1e-6),
        };
    }
    // every node gets a leak so none floats when the only links are capacitors
    for n in 1..8 {
        let node = format!("n{n}");
        if c.node_id(&node).is_some() {
            c.resistor(&format!("RLEAK{n}"), &node, "0", 1e6);
        }
    }
    c
}

proptest! {
    #[test]
    fn conductance_block_is_symmetric(parts in network(), f in 1e2f64..1e6) {
        let c = build(&parts, &(0..parts.len()).collect::<Vec<_>>());
        prop_assert!(validate(&c).is_empty());
        let sys = assemble_ac(&c, 2.0 * PI * f).unwrap();
        let nodes = c.node_count() - 1;
        for i in 0..nodes {
            for j in 0..nodes {
                prop_assert_eq!(sys.matrix.get(i, j), sys.matrix.get(j, i));
            }
        }
    }

    #[test]
    fn element_order_does_not_change_the_solution(
        parts in network(),
        seed in any::<u64>(),
        f in 1e2f64..1e6,
    ) {
        let forward: Vec<usize> = (0..parts.len()).collect();
        // deterministic shuffle from the seed
        let mut shuffled = forward.clone();
        let mut state = seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let w = 2.0 * PI * f;
        let a = solve_ac(&build(&parts, &forward), w).unwrap();
        let b = solve_ac(&build(&parts, &shuffled), w).unwrap();
        for n in 0..8 {
            let name = format!("n{n}");
            if let (Some(x), Some(y)) = (a.voltage(&name), b.voltage(&name)) {
                prop_assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()), "{name}: {x} vs {y}");
            }
        }
        let (ia, ib) = (a.current("VS").unwrap(), b.current("VS").unwrap());
        prop_assert!((ia - ib).norm() <= 1e-9 * (1.0 + ia.norm()));
    }
}

/// Far-end voltage of a line between matched 50 ohm terminations.
fn line_transfer(segments: Option<usize>, w: f64) -> Complex64 {
    let (z, tau, len) = (50.0, 1e-6, 1.0);
    // per-metre constants with sqrt(L/C) = z and len sqrt(LC) = tau
    let (l, cap) = (z * tau / len, tau / (z * len));
    let mut c = Circuit::new();
    c.vsource("VS", "src", "0", Waveform::sine(1.0, w / (2.0 * PI)));
    c.resistor("RS", "src", "a", z);
    let (pa, g, pb) = (c.node("a"), c.node("0"), c.node("b"));
    let kind = match segments {
        None => ElementKind::LosslessLine {
            p1: pa,
            n1: g,
            p2: pb,
            n2: g,
            impedance: z,
            delay: tau,
        },
        Some(n) => ElementKind::LossyLine {
            p1: pa,
            n1: g,
            p2: pb,
            n2: g,
            r_per_m: 0.0,
            l_per_m: l,
            c_per_m: cap,
            length: len,
            segments: n,
        },
    };
    c.add(Element::new("T1", kind));
    c.resistor("RL", "b", "0", z);
    solve_ac(&c, w).unwrap().voltage("b").unwrap()
}

#[test]
fn lossless_ladder_converges_to_the_ideal_line() {
    let w = 2.0 * PI * 200e3;
    let exact = line_transfer(None, w);
    // matched ideal line: half amplitude, phase lag w tau
    assert!((exact - Complex64::from_polar(0.5, -w * 1e-6)).norm() < 1e-12);
    let errors: Vec<f64> = [8, 16, 32, 64, 128]
        .iter()
        .map(|&n| (line_transfer(Some(n), w) - exact).norm())
        .collect();
    for pair in errors.windows(2) {
        assert!(pair[1] < pair[0], "errors {errors:?}");
    }
    assert!(errors[3] < errors[2]);
}

#[test]
fn table_preset_line_constants() {
    let p = TransducerParams::table_i_stated();
    let mut c = Circuit::new();
    echolab::circuit::add_piezo(&mut c, "X", &p, ("e", "0"), ("b", "0"), ("f", "0")).unwrap();
    let line = c
        .elements()
        .iter()
        .find_map(|e| match e.kind {
            ElementKind::LosslessLine {
                impedance, delay, ..
            } => Some((impedance, delay)),
            _ => None,
        })
        .unwrap();
    assert_eq!(line.0, 4445.0);
    // the table prints the electrical length rounded to 2 us
    assert!((line.1 - 2e-6).abs() < 0.05 * 2e-6);
}

#[test]
fn source_current_into_capacitor_and_series_rl() {
    let w = 2.0 * PI * 10e3;
    let mut c = Circuit::new();
    c.vsource("V1", "a", "0", Waveform::sine(1.0, 10e3));
    c.capacitor("C1", "a", "0", 3e-9);
    let i = solve_ac(&c, w).unwrap().current("V1").unwrap();
    assert!((i.norm() - w * 3e-9).abs() < 1e-12 * w * 3e-9);

    let mut c = Circuit::new();
    c.vsource("V1", "a", "0", Waveform::sine(1.0, 10e3));
    c.resistor("R1", "a", "b", 100.0);
    c.inductor("L1", "b", "0", 2e-3);
    let i = solve_ac(&c, w).unwrap().current("V1").unwrap();
    let expected = 1.0 / (100.0f64.powi(2) + (w * 2e-3).powi(2)).sqrt();
    assert!((i.norm() - expected).abs() < 1e-12);
}
