use proptest::prelude::*;
use sparse_chaos::experiments::{lhs_laplace, ExperimentConfig, FunctionalSpec};
use sparse_chaos::model::{altruism_preset, default_mutation_profile, AltruismParams, CoefficientBundle};
use sparse_chaos::paths::{
    recombine_levels, simulate_independent, simulate_xd, simulate_xd_levels, simulate_y, simulate_y_timedep,
    simulate_zd_levels, Immigration, Scheme, SimOptions, TimeGrid,
};
use sparse_chaos::stats::{trend_decreasing, Welford};
use sparse_chaos::{RngStream, SparseInitialCondition};

fn bundle(alpha: f64, mu_inf: f64) -> CoefficientBundle {
    let mut p = AltruismParams::new(alpha, 1.0, 1.0, 2.0);
    p.mu_inf = mu_inf;
    altruism_preset(p, default_mutation_profile()).unwrap()
}

fn init_strategy() -> impl Strategy<Value = SparseInitialCondition> {
    prop::collection::btree_map(1usize..=20, 0.0f64..=1.0, 0..4)
        .prop_map(|m| SparseInitialCondition::new(m.into_iter().collect()).unwrap())
}

fn in_unit(v: &[f64]) -> bool {
    v.iter().all(|x| (0.0..=1.0).contains(x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn values_stay_in_unit_interval(
        init in init_strategy(),
        alpha in 0.2f64..3.0,
        mu in 0.0f64..2.0,
        d in 20usize..60,
        seed in any::<u64>(),
        em in any::<bool>(),
    ) {
        let b = bundle(alpha, mu);
        let grid = TimeGrid::covering(0.0, 0.3, b.default_dt()).unwrap();
        let s = RngStream::new(seed, 0);
        let opts = if em { SimOptions::default().with_scheme(Scheme::EulerMaruyama) } else { SimOptions::default() };
        let xd = simulate_xd(&b, d, &init, &grid, &s, &opts).unwrap();
        prop_assert!(in_unit(xd.all_values()));
        let lv = simulate_xd_levels(&b, d, 6, &init, &grid, &s, &opts).unwrap();
        prop_assert!(in_unit(lv.all_values()));
        for k in 0..=grid.n_steps {
            let t: Vec<f64> = lv.deme_totals(k).unwrap();
            prop_assert!(in_unit(&t));
        }
        let z = simulate_zd_levels(&b, d, 6, &init, &grid, &s, &opts).unwrap();
        prop_assert!(in_unit(z.all_values()));
        let y = simulate_y(&b, init.entries().first().map_or(0.5, |e| e.1), &grid, &s, &opts).unwrap();
        prop_assert!(in_unit(&y.values));
    }

    #[test]
    fn zero_is_a_trap_without_immigration(x in 0.0f64..=1.0, alpha in 0.2f64..3.0, seed in any::<u64>()) {
        let b = bundle(alpha, 0.0);
        let grid = TimeGrid::covering(0.0, 2.0, b.default_dt()).unwrap();
        let s = RngStream::new(seed, 1);
        let y = simulate_y(&b, x, &grid, &s, &SimOptions::default()).unwrap();
        if let Some(k) = y.values.iter().position(|&v| v == 0.0) {
            prop_assert!(y.values[k..].iter().all(|&v| v == 0.0));
        }
        let z = simulate_y_timedep(&b, 50, &Immigration::Constant(0.0), x, &grid, &s, &SimOptions::default()).unwrap();
        if let Some(k) = z.values.iter().position(|&v| v == 0.0) {
            prop_assert!(z.values[k..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_bits(init in init_strategy(), seed in any::<u64>()) {
        let b = bundle(1.5, 0.5);
        let grid = TimeGrid::covering(0.0, 0.2, b.default_dt()).unwrap();
        let s = RngStream::new(seed, 3);
        let a = simulate_xd_levels(&b, 40, 5, &init, &grid, &s, &SimOptions::default()).unwrap();
        let c = simulate_xd_levels(&b, 40, 5, &init, &grid, &s, &SimOptions::default()).unwrap();
        prop_assert!(a.all_values().iter().zip(c.all_values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(a.totals.len(), c.totals.len());
    }
}

#[test]
fn replicate_reductions_do_not_depend_on_worker_count() {
    let b = bundle(1.5, 0.0);
    let init = SparseInitialCondition::new(vec![(1, 0.3)]).unwrap();
    let spec = FunctionalSpec::identity(vec![0.5]).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| lhs_laplace(&b, &init, 30, &spec, 64, &RngStream::new(5, 0), &ExperimentConfig::default()).unwrap())
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.mean.to_bits(), three.mean.to_bits());
    assert_eq!(one.std_error.to_bits(), three.std_error.to_bits());
}

#[test]
fn independent_system_without_immigration_keeps_empty_demes_empty() {
    let b = bundle(1.5, 0.0);
    let init = SparseInitialCondition::new(vec![(2, 0.4)]).unwrap();
    let grid = TimeGrid::covering(0.0, 1.0, b.default_dt()).unwrap();
    let p = simulate_independent(&b, 30, &Immigration::Constant(0.0), &init, &grid, &RngStream::new(9, 0), &SimOptions::default())
        .unwrap();
    for k in 0..=grid.n_steps {
        let t = p.deme_totals(k).unwrap();
        assert!(t.iter().enumerate().all(|(i, &v)| i == 1 || v == 0.0));
    }
}

/// Mass above level `K` decays in `K`, uniformly over the ladder.
#[test]
fn level_tail_decays() {
    let b = bundle(1.5, 0.0);
    let init = SparseInitialCondition::new(vec![(1, 0.3)]).unwrap();
    let grid = TimeGrid::covering(0.0, 1.0, b.default_dt()).unwrap();
    let last = grid.n_steps;
    let opts = SimOptions::probes(vec![last]);
    let ks = [2usize, 4, 6];
    let mut worst = vec![sparse_chaos::Estimate::exact(0.0); ks.len()];
    for d in [25usize, 100] {
        let mut acc: Vec<Welford> = vec![Welford::default(); ks.len()];
        for r in 0..300 {
            let p = simulate_xd_levels(&b, d, 8, &init, &grid, &RngStream::new(11, d as u64).child(r), &opts).unwrap();
            let f = p.frame(last).unwrap();
            for (j, &k) in ks.iter().enumerate() {
                let tail: f64 = f.chunks(p.levels).map(|c| c[k + 1..].iter().sum::<f64>()).sum();
                acc[j].push(tail);
            }
        }
        for j in 0..ks.len() {
            let e = acc[j].estimate();
            if e.mean > worst[j].mean {
                worst[j] = e;
            }
        }
    }
    let v = trend_decreasing(&worst, 3.0);
    assert!(v.lenient, "{worst:?}");
    assert!(worst[0].mean > worst[2].mean);
}

/// Level sums coupled to the D-deme system through the recombined noise
/// converge pathwise as dt shrinks.
#[test]
fn recombination_error_shrinks_with_dt() {
    let b = bundle(1.5, 0.5);
    let init = SparseInitialCondition::new(vec![(1, 0.5), (3, 0.2)]).unwrap();
    let opts = SimOptions::default().with_scheme(Scheme::EulerMaruyama);
    let err = |dt: f64| {
        let grid = TimeGrid::covering(0.0, 0.5, dt).unwrap();
        let mut w = Welford::default();
        for r in 0..8 {
            let lv = simulate_xd_levels(&b, 10, 6, &init, &grid, &RngStream::new(13, r), &opts).unwrap();
            w.push(recombine_levels(&b, &lv).unwrap().sup_difference());
        }
        w.mean()
    };
    let (e3, e4) = (err(1e-3), err(1e-4));
    let c = e3 / 1e-3f64.powf(0.25);
    assert!(e4 <= 2.0 * c * 1e-4f64.powf(0.25), "{e3} {e4}");
}

#[test]
fn recombination_needs_gaussian_levels() {
    let b = bundle(1.5, 0.5);
    let init = SparseInitialCondition::new(vec![(1, 0.5)]).unwrap();
    let grid = TimeGrid::covering(0.0, 0.1, 1e-3).unwrap();
    let lv = simulate_xd_levels(&b, 10, 4, &init, &grid, &RngStream::new(1, 0), &SimOptions::default()).unwrap();
    assert!(recombine_levels(&b, &lv).is_err());
    let xd = simulate_xd(&b, 10, &init, &grid, &RngStream::new(1, 0), &SimOptions::default()).unwrap();
    assert!(recombine_levels(&b, &xd).is_err());
}
