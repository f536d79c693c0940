use echolab_wasm::{check_netlist_text, load_shift_values, presets, usn_impedance_values};

#[test]
fn builtin_presets_are_listed() {
    let names = presets();
    for n in ["tableI", "tableI-stated", "tableI-derived"] {
        assert!(names.iter().any(|x| x == n), "{names:?}");
    }
}

#[test]
fn netlist_check_normalizes_or_points_at_the_fault() {
    let ok = check_netlist_text("v1 in 0 dc 1\nr1 in out 1k\nc1 out 0 1n\n.tran 1n 1u\n").unwrap();
    assert!(ok.contains("* elements: 3, nodes: 2"), "{ok}");
    // the normalized text checks again to the same result
    assert_eq!(check_netlist_text(&ok).unwrap(), ok);
    let macro_ok = check_netlist_text("XPZT e 0 b 0 f 0 preset=tableI\nR1 e 0 1k\n").unwrap();
    assert!(macro_ok.contains("* elements: 10,"), "{macro_ok}");
    let err = check_netlist_text("R1 a 0 1k\nQ1 a 0 1\n").unwrap_err();
    assert!(err.starts_with("2:1:"), "{err}");
}

#[test]
fn impedance_has_a_maximum_near_the_nominal_resonance() {
    let v = usn_impedance_values("tableI-stated", 0.0, 230e3, 250e3, 401).unwrap();
    assert_eq!(v.len(), 3 * 401);
    let (k, _) = v
        .chunks(3)
        .enumerate()
        .max_by(|a, b| a.1[1].total_cmp(&b.1[1]))
        .unwrap();
    let f = v[3 * k];
    assert!((f - 240.6e3).abs() < 200.0, "peak at {f}");
    assert!(usn_impedance_values("tableI-stated", 0.0, 250e3, 230e3, 10).is_err());
    assert!(usn_impedance_values("nosuch", 0.0, 230e3, 250e3, 10).is_err());
}

#[test]
fn load_pulls_the_resonance_down() {
    let zero = load_shift_values("tableI-stated", 0.0).unwrap();
    assert_eq!(zero[2], 0.0);
    let loaded = load_shift_values("tableI-stated", 2e-9).unwrap();
    assert!(loaded[2] < 0.0, "{loaded:?}");
    assert!(loaded[0] < loaded[1]);
    assert!(load_shift_values("tableI-stated", -1.0).is_err());
}
