use proptest::prelude::*;
use sparse_chaos::model::{altruism_preset, dawson_greven_preset, default_mutation_profile, AltruismParams, DawsonGrevenParams};
use sparse_chaos::quadrature::{altruism_closed_form, excursion_area, integrate, mean_excursion_mass, ScaleTable};

fn altruism(alpha: f64, beta: f64, kappa: f64, a: f64) -> (AltruismParams, sparse_chaos::CoefficientBundle) {
    let p = AltruismParams::new(alpha, beta, kappa, a);
    (p, altruism_preset(p, default_mutation_profile()).unwrap())
}

#[test]
fn scale_function_matches_integrated_closed_form() {
    let (p, b) = altruism(1.0, 1.0, 1.0, 2.0);
    let table = ScaleTable::build(&b, 1e-10).unwrap();
    for i in 1..=200 {
        let y = i as f64 / 201.0;
        let exact = integrate(|z| altruism_closed_form::s(&p, z), 0.0, y, 1e-13).value;
        let got = table.big_s(y);
        assert!(((got - exact) / exact).abs() <= 1e-8, "y {y}: {got} vs {exact}");
    }
}

#[test]
fn scale_function_monotone_and_convex_where_drift_negative() {
    let (_, b) = altruism(1.5, 1.0, 1.0, 2.0);
    let table = ScaleTable::build(&b, 1e-10).unwrap();
    let ys: Vec<f64> = (1..400).map(|i| i as f64 / 400.0).collect();
    let s: Vec<f64> = ys.iter().map(|&y| table.big_s(y)).collect();
    for w in s.windows(2) {
        assert!(w[1] >= w[0]);
    }
    // h <= 0 on all of [0,1] for this preset, so S is convex throughout.
    assert!(ys.iter().all(|&y| b.h(y) <= 0.0));
    for w in s.windows(3) {
        assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-12 * w[1].abs());
    }
}

#[test]
fn altruism_area_closed_values() {
    // kappa = 1, a = 2, beta = 1: area = (2/(2 alpha - 1)) (1 - 2^{1 - 2 alpha}),
    // and 2 ln 2 at alpha = 1/2.
    for (alpha, exact) in [(0.5, 2.0 * std::f64::consts::LN_2), (1.0, 1.0), (1.5, 0.75), (2.0, 7.0 / 12.0)] {
        let (_, b) = altruism(alpha, 1.0, 1.0, 2.0);
        let area = excursion_area(&b, 1e-10).unwrap();
        assert!((area.value - exact).abs() <= 1e-8, "alpha {alpha}: {} vs {exact}", area.value);
    }
}

#[test]
fn dawson_greven_mass_is_finite() {
    let b = dawson_greven_preset(DawsonGrevenParams {
        c: 1.0,
        d: 1.0,
        m: 0.0,
        s: 0.5,
    })
    .unwrap();
    let m = mean_excursion_mass(&b, 1e-10).unwrap();
    assert!(m.value.is_finite() && m.value > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refinement_stability(alpha in 0.4f64..2.5, kappa in 0.5f64..2.0) {
        let (_, b) = altruism(alpha, 1.0, kappa, 2.0);
        let coarse = excursion_area(&b, 1e-8).unwrap();
        let fine = excursion_area(&b, 5e-9).unwrap();
        prop_assert!((coarse.value - fine.value).abs() <= coarse.abs_error + fine.abs_error + 1e-14);
    }

    #[test]
    fn closed_form_density_random_params(alpha in 0.3f64..3.0, kappa in 0.3f64..3.0, a in 1.2f64..4.0) {
        let (p, b) = altruism(alpha, 1.0, kappa, a);
        let table = ScaleTable::build(&b, 1e-10).unwrap();
        for i in 1..50 {
            let z = i as f64 / 50.0;
            let exact = altruism_closed_form::s(&p, z);
            prop_assert!(((table.s(z) - exact) / exact).abs() <= 1e-8);
        }
    }
}
