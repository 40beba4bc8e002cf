use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use vmp_core::expfam::{log_partition, moments_from_natural, NaturalParams};

fn spd(d: usize) -> Vec<f64> {
    let mut m = vec![0.1; d * d];
    (0..d).for_each(|i| m[i * d + i] = 2.0);
    m
}

fn moments(c: &mut Criterion) {
    let cases = [
        ("gaussian-10", NaturalParams::gaussian(&[0.5; 10], &spd(10))),
        ("wishart-10", NaturalParams::wishart(15.0, &spd(10))),
        ("dirichlet-40", NaturalParams::dirichlet(&[0.7; 40])),
        ("gamma", NaturalParams::gamma(3.0, 2.0)),
    ];
    let mut group = c.benchmark_group("moments");
    for (name, phi) in &cases {
        group.bench_function(*name, |b| b.iter(|| moments_from_natural(black_box(phi)).unwrap()));
    }
    group.finish();
    let mut group = c.benchmark_group("log_partition");
    for (name, phi) in &cases {
        group.bench_function(*name, |b| b.iter(|| log_partition(black_box(phi)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, moments);
criterion_main!(benches);
