use sparse_chaos::excursions::QSampler;
use sparse_chaos::forest::{extinction_mc, sample_forest, ForestParams};
use sparse_chaos::model::{altruism_preset, default_mutation_profile, AltruismParams, CoefficientBundle};
use sparse_chaos::quadrature::excursion_area;
use sparse_chaos::stats::{trend_decreasing, Welford};
use sparse_chaos::{RngStream, SparseInitialCondition};

fn bundle(alpha: f64, mu_inf: f64) -> CoefficientBundle {
    let mut p = AltruismParams::new(alpha, 1.0, 1.0, 2.0);
    p.mu_inf = mu_inf;
    altruism_preset(p, default_mutation_profile()).unwrap()
}

fn init(x: f64) -> SparseInitialCondition {
    SparseInitialCondition::single(x).unwrap()
}

#[test]
fn children_live_inside_parents() {
    let b = bundle(1.0, 0.5);
    let q = QSampler::new(&b, 0.05).unwrap();
    let params = ForestParams::new(3.0);
    for r in 0..100 {
        let f = sample_forest(&q, &init(0.6), &params, &RngStream::new(1, r)).unwrap();
        for n in &f.nodes {
            assert!(n.censored || n.peak <= 1.0);
            if let Some(p) = n.parent {
                let p = &f.nodes[p];
                assert!(n.birth_time >= p.birth_time);
                assert!(p.censored || n.birth_time - p.birth_time <= p.length + 1e-12);
                assert_eq!(n.generation, p.generation + 1);
            }
        }
        let gens: Vec<usize> = f.nodes.iter().map(|n| n.generation).collect();
        let top = gens.iter().copied().max().unwrap_or(0);
        assert!((0..=top).all(|g| gens.contains(&g)));
    }
}

#[test]
fn truncating_generations_only_removes_mass() {
    let b = bundle(1.5, 0.0);
    let q = QSampler::new(&b, 0.05).unwrap();
    for r in 0..50 {
        let s = RngStream::new(2, r);
        let full = sample_forest(&q, &init(0.5), &ForestParams::new(2.0), &s).unwrap();
        let cut = sample_forest(&q, &init(0.5), &ForestParams::new(2.0).with_generations(1), &s).unwrap();
        for t in [0.25, 0.5, 1.0, 2.0] {
            assert!(cut.total_mass(t) <= full.total_mass(t) + 1e-12);
        }
        assert!(cut.nodes.len() <= full.nodes.len());
    }
}

/// A forest rooted at one sampler excursion is a Galton-Watson tree whose
/// offspring mean is at most the excursion area.
#[test]
fn progeny_bounded_by_branching_mean() {
    let b = bundle(2.0, 0.0);
    let area = excursion_area(&b, 1e-10).unwrap().value;
    let delta = 0.02;
    let q = QSampler::new(&b, delta).unwrap();
    let mut w = Welford::default();
    for r in 0..1000 {
        let f = sample_forest(&q, &init(delta), &ForestParams::new(50.0).probes_only(vec![]), &RngStream::new(3, r)).unwrap();
        w.push(f.nodes.len() as f64);
    }
    let e = w.estimate();
    assert!(e.mean - 3.0 * e.std_error <= 1.0 / (1.0 - area), "{e:?} vs {}", 1.0 / (1.0 - area));
}

#[test]
fn subcritical_total_mass_decreases() {
    let b = bundle(1.5, 0.0);
    let q = QSampler::new(&b, 0.02).unwrap();
    let times = vec![2.0, 5.0, 10.0];
    let params = ForestParams::new(10.0).probes_only(times.clone());
    let mut acc = vec![Welford::default(); 3];
    for r in 0..1000 {
        let f = sample_forest(&q, &init(0.3), &params, &RngStream::new(4, r)).unwrap();
        for (j, &t) in times.iter().enumerate() {
            acc[j].push(f.total_mass(t));
        }
    }
    let est: Vec<_> = acc.iter().map(|w| w.estimate()).collect();
    assert!(est.iter().all(|e| e.mean.is_finite()));
    assert!(trend_decreasing(&est, 3.0).lenient, "{est:?}");
}

#[test]
fn total_mass_stable_across_levels() {
    let b = bundle(1.5, 0.0);
    let base = QSampler::new(&b, 0.05).unwrap();
    let params = ForestParams::new(0.5).probes_only(vec![0.5]);
    let est: Vec<_> = [0.05, 0.02, 0.01]
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let q = base.at_delta(d).unwrap();
            let mut w = Welford::default();
            for r in 0..800 {
                let f = sample_forest(&q, &init(0.3), &params, &RngStream::new(5, k as u64).child(r)).unwrap();
                w.push(f.total_mass(0.5));
            }
            w.estimate()
        })
        .collect();
    for e in &est[1..] {
        assert!(e.overlaps(&est[0], 2.0) || e.overlaps(&est[2], 2.0), "{est:?}");
    }
    assert!(est[1].overlaps(&est[2], 2.0), "{est:?}");
}

#[test]
fn subcritical_forest_dies_out() {
    let b = bundle(1.5, 0.0);
    let q = QSampler::new(&b, 0.02).unwrap();
    let c = extinction_mc(&q, 0.3, &[5.0, 20.0, 50.0], 1000, 100_000, &RngStream::new(6, 0)).unwrap();
    for w in c.extinct.windows(2) {
        assert!(w[1].mean >= w[0].mean);
    }
    assert!(c.extinct[2].mean > 0.95, "{:?}", c.extinct);
}

#[test]
fn supercritical_forest_survives() {
    let b = bundle(0.5, 0.0);
    let q = QSampler::new(&b, 0.02).unwrap();
    let c = extinction_mc(&q, 0.3, &[5.0, 50.0], 200, 3000, &RngStream::new(7, 0)).unwrap();
    let e = c.extinct[1];
    assert!(e.mean + 3.0 * e.std_error < 1.0, "{e:?}, capped {}", c.capped);
}

#[test]
fn empty_root_is_extinct() {
    let b = bundle(1.5, 0.0);
    let q = QSampler::new(&b, 0.02).unwrap();
    let c = extinction_mc(&q, 0.0, &[0.0, 1.0], 20, 100, &RngStream::new(8, 0)).unwrap();
    assert!(c.extinct.iter().all(|e| e.mean == 1.0));
}
