use echolab::piezo::{
    consistency_report, AirBase, AirChannelParams, StatedTable, TransducerBase, TransducerParams,
};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    ((a - b) / b).abs() <= tol
}

#[test]
fn table_geometry() {
    let p = TransducerParams::table_i_derived();
    assert!(close(p.area, 1.539e-4, 1e-3));
    assert!(close(p.tau_c, 2.078e-6, 1e-3));
    assert!(close(p.turn_ratio, 0.4486, 1e-3));
}

#[test]
fn consistency_flags() {
    let p = TransducerParams::table_i_derived();
    let air = AirChannelParams::table_i(p.area);
    let rows = consistency_report(&p, &air, &StatedTable::TABLE_I);
    let flagged = |f: &str| rows.iter().find(|r| r.field == f).unwrap().flagged;
    assert!(flagged("C0"));
    assert!(!flagged("Zc"));
    assert!(!flagged("N"));
    let c0 = rows.iter().find(|r| r.field == "C0").unwrap();
    assert!((c0.stated / c0.formula - 100.0).abs() < 2.0);
}

#[test]
fn lossless_air_has_zero_resistance() {
    let air = AirChannelParams::derive(
        AirBase {
            attenuation: 0.0,
            ..AirBase::TABLE_I
        },
        154e-6,
    )
    .unwrap();
    assert_eq!(air.r_per_m, 0.0);
}

fn air_base() -> impl Strategy<Value = (AirBase, f64)> {
    (
        0.1f64..5.0,
        100.0f64..2000.0,
        0.0f64..5.0,
        1e-4f64..1e-1,
        1e-6f64..1e-2,
    )
        .prop_map(|(density, velocity, attenuation, gap, area)| {
            (
                AirBase {
                    density,
                    velocity,
                    attenuation,
                    gap,
                },
                area,
            )
        })
}

proptest! {
    #[test]
    fn air_line_identities((base, area) in air_base()) {
        let air = AirChannelParams::derive(base, area).unwrap();
        let z = base.density * base.velocity * area;
        prop_assert!(close((air.l_per_m / air.c_per_m).sqrt(), z, 1e-12));
        prop_assert!(close(air.l_per_m * air.c_per_m, 1.0 / (base.velocity * base.velocity), 1e-12));
    }

    #[test]
    fn doubling_area_scales_line_constants((base, area) in air_base()) {
        let one = AirChannelParams::derive(base, area).unwrap();
        let two = AirChannelParams::derive(base, 2.0 * area).unwrap();
        prop_assert!(close(two.characteristic_impedance(), 2.0 * one.characteristic_impedance(), 1e-12));
        prop_assert!(close(two.l_per_m, 2.0 * one.l_per_m, 1e-12));
        prop_assert!(close(two.c_per_m, 0.5 * one.c_per_m, 1e-12));
        if base.attenuation > 0.0 {
            prop_assert!(close(two.r_per_m, 2.0 * one.r_per_m, 1e-12));
        }
        prop_assert!(close(two.delay(), one.delay(), 1e-12));
    }

    #[test]
    fn derived_h_times_c0_is_n(
        density in 1e3f64..2e4,
        velocity in 1e3f64..1e4,
        permittivity in 1e-9f64..1e-7,
        stress_constant in 1.0f64..50.0,
        coupling in 0.05f64..0.95,
        diameter in 1e-3f64..5e-2,
        thickness in 1e-4f64..2e-2,
    ) {
        let p = TransducerParams::derive(TransducerBase {
            density,
            velocity,
            permittivity,
            stress_constant,
            coupling,
            diameter,
            thickness,
        })
        .unwrap();
        prop_assert!(close(p.h * p.c0, p.turn_ratio, 1e-12));
        prop_assert!(close(p.zc, density * velocity * p.area, 1e-12));
        prop_assert!(close(p.tau_c, thickness / velocity, 1e-12));
    }
}
