use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sparse_chaos::excursions::QSampler;
use sparse_chaos::forest::{sample_forest, ForestParams};
use sparse_chaos::model::{altruism_preset, default_mutation_profile, AltruismParams, CoefficientBundle};
use sparse_chaos::paths::{simulate_xd, simulate_xd_levels, simulate_y, SimOptions, TimeGrid};
use sparse_chaos::quadrature::{excursion_area, ScaleTable};
use sparse_chaos::{RngStream, SparseInitialCondition};

fn bundle() -> CoefficientBundle {
    altruism_preset(AltruismParams::new(1.5, 1.0, 1.0, 2.0), default_mutation_profile()).unwrap()
}

fn quadrature(c: &mut Criterion) {
    let b = bundle();
    c.bench_function("scale_table_build", |x| x.iter(|| ScaleTable::build(black_box(&b), 1e-10).unwrap()));
    c.bench_function("excursion_area", |x| x.iter(|| excursion_area(black_box(&b), 1e-10).unwrap()));
}

fn paths(c: &mut Criterion) {
    let b = bundle();
    let grid = TimeGrid::covering(0.0, 1.0, b.default_dt()).unwrap();
    let init = SparseInitialCondition::new(vec![(1, 0.3)]).unwrap();
    let opts = SimOptions::probes(vec![grid.n_steps]);
    let mut r = 0u64;
    c.bench_function("simulate_y", |x| {
        x.iter(|| {
            r += 1;
            simulate_y(&b, 0.3, &grid, &RngStream::new(1, r), &SimOptions::default()).unwrap()
        })
    });
    c.bench_function("simulate_xd_d100", |x| {
        x.iter(|| {
            r += 1;
            simulate_xd(&b, 100, &init, &grid, &RngStream::new(2, r), &opts).unwrap()
        })
    });
    c.bench_function("simulate_xd_levels_d100", |x| {
        x.iter(|| {
            r += 1;
            simulate_xd_levels(&b, 100, 8, &init, &grid, &RngStream::new(3, r), &opts).unwrap()
        })
    });
}

fn forest(c: &mut Criterion) {
    let b = bundle();
    let q = QSampler::new(&b, 0.02).unwrap();
    let init = SparseInitialCondition::new(vec![(1, 0.3)]).unwrap();
    let params = ForestParams::new(1.0).probes_only(vec![1.0]);
    let mut r = 0u64;
    c.bench_function("sample_forest", |x| {
        x.iter(|| {
            r += 1;
            sample_forest(&q, &init, &params, &RngStream::new(4, r)).unwrap()
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = quadrature, paths, forest
}
criterion_main!(kernels);
