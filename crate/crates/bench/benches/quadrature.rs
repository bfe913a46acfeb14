use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

use truncmix::model::{MixtureParams, TruncationSpec};
use truncmix::quad::{expect_scalar, survival_mass, QuadConfig};

fn bench_survival(c: &mut Criterion) {
    let cfg = QuadConfig::default();
    let mut group = c.benchmark_group("survival_mass");

    let p1 = MixtureParams::univariate(1.0, 1.0).unwrap();
    let t1 = TruncationSpec::interval(0.5, f64::INFINITY).unwrap();
    group.bench_function("1d_half_line", |b| {
        b.iter(|| survival_mass(black_box(&p1), &t1, &cfg).unwrap())
    });

    let p2 = MixtureParams::new(
        DVector::from_vec(vec![2.534, 6.395]),
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let t2 = TruncationSpec::box_nd(vec![(1.0, 2.0), (-3.0, 1.5)]).unwrap();
    group.bench_function("2d_box", |b| {
        b.iter(|| survival_mass(black_box(&p2), &t2, &cfg).unwrap())
    });

    let p3 =
        MixtureParams::new(DVector::from_vec(vec![1.5, 0.5]), DMatrix::identity(2, 2)).unwrap();
    let t3 = TruncationSpec::annulus_union(vec![(1.0, 3.0)]).unwrap();
    group.bench_function("2d_annulus", |b| {
        b.iter(|| survival_mass(black_box(&p3), &t3, &cfg).unwrap())
    });

    group.finish();
}

fn bench_expect(c: &mut Criterion) {
    let cfg = QuadConfig::default();
    let p = MixtureParams::new(DVector::from_vec(vec![1.5, 0.5]), DMatrix::identity(2, 2)).unwrap();
    let t = TruncationSpec::annulus_union(vec![(1.0, 3.0)]).unwrap();
    c.bench_function("expect_tanh_moment_2d_annulus", |b| {
        b.iter(|| {
            expect_scalar(
                |x| x[0] * (1.5 * x[0] + 0.5 * x[1]).tanh(),
                black_box(&p),
                &t,
                &cfg,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_survival, bench_expect);
criterion_main!(benches);
