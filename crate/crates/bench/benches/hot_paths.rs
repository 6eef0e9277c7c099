use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use wienerlab::conditional::{fit_conditional, FeatureSet};
use wienerlab::entropy::invertibility_gap;
use wienerlab::shifts::{girsanov_exponent, ShiftMap};
use wienerlab::sinkhorn::{entropic_ot, SinkhornConfig};
use wienerlab::variational::{fixed_point_drift, CylindricalFunctional, VariationalConfig};
use wienerlab::wiener::{brownian_path, RngStream};
use wienerlab::{EstimatorConfig, GapConfig};
use wienerlab_bench::{grid, ou, paths, SEED};

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("brownian_path");
    for n_steps in [64, 256, 1024] {
        let g = grid(n_steps);
        group.throughput(Throughput::Elements(n_steps as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n_steps), &g, |b, g| {
            let stream = RngStream::new(SEED, 0);
            let mut i = 0u64;
            b.iter(|| {
                i += 1;
                black_box(brownian_path(g, 1, stream.offset(i)))
            })
        });
    }
    group.finish();
}

fn girsanov(c: &mut Criterion) {
    let g = grid(256);
    let ps = paths(&g, 64);
    let u = ou();
    c.bench_function("girsanov_exponent/ou/256", |b| {
        b.iter(|| ps.iter().map(|p| girsanov_exponent(u.as_ref(), p).unwrap()).sum::<f64>())
    });
}

fn regression(c: &mut Criterion) {
    let g = grid(128);
    let ps = paths(&g, 2000);
    let targets: Vec<Vec<f64>> = ps.iter().map(|p| (0..128).map(|k| p.value(k, 0).sin()).collect()).collect();
    let features = FeatureSet::Default.build(1, &[]);
    c.bench_function("fit_conditional/default/2000x128", |b| {
        b.iter(|| fit_conditional(&targets, &ps, features.clone(), 1e-8).unwrap())
    });
}

fn sinkhorn(c: &mut Criterion) {
    let g = grid(16);
    let ps = paths(&g, 400);
    let x: Vec<f64> = ps[..200].iter().map(|p| p.endpoint()[0]).collect();
    let y: Vec<f64> = ps[200..].iter().map(|p| p.endpoint()[0] + 0.5).collect();
    c.bench_function("entropic_ot/200x200", |b| b.iter(|| entropic_ot(&x, &y, 1, &SinkhornConfig::default()).unwrap()));
}

fn estimators(c: &mut Criterion) {
    let g = grid(128);
    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    let shift = ShiftMap::new(ou());
    group.bench_function("invertibility_gap/ou/2000", |b| {
        b.iter(|| invertibility_gap(&shift, &g, 2000, RngStream::new(SEED, 1), &EstimatorConfig::default(), &GapConfig::default()).unwrap())
    });
    let f = CylindricalFunctional::quadratic(0.25, 1).unwrap();
    let cfg = VariationalConfig {
        estimator: EstimatorConfig::default().with_features(FeatureSet::StateLinear),
        max_iter: 10,
        ..Default::default()
    };
    group.bench_function("fixed_point_drift/quadratic/2000", |b| {
        b.iter(|| fixed_point_drift(&f, &g, 2000, RngStream::new(SEED, 2), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sampling, girsanov, regression, sinkhorn, estimators);
criterion_main!(benches);
