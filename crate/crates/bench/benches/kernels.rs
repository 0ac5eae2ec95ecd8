use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use convgp::moment::{input_moment_pair, zero_offset};
use convgp::propagate::{conv_propagate, conv_propagate_diag, relu_moment};
use convgp::{
    build_architecture, gram_matrices, gram_matrix, ArchOptions, ConvGeometry, CovKind, FiniteNet, WeightCovariance,
};
use convgp_bench::random_images;

fn propagation(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv step 16x16");
    let x = random_images(2, 3, &[16, 16], 1);
    let pair = input_moment_pair(&x[0], &x[1]).unwrap();
    let geom = ConvGeometry::same(x[0].extent().clone(), 3, 1).unwrap();
    let indep = WeightCovariance::build(CovKind::independent(), geom.patch()).unwrap();
    let matern = WeightCovariance::build(CovKind::matern32(2.0), geom.patch()).unwrap();
    group.bench_function("full, independent", |b| {
        b.iter(|| conv_propagate(black_box(&pair.cross), &indep, &geom).unwrap())
    });
    group.bench_function("full, matern", |b| {
        b.iter(|| conv_propagate(black_box(&pair.cross), &matern, &geom).unwrap())
    });
    let zero = [zero_offset(2)];
    group.bench_function("diagonal only", |b| {
        b.iter(|| conv_propagate_diag(black_box(&pair.cross), &indep, &geom, &zero).unwrap())
    });
    group.bench_function("relu", |b| b.iter(|| relu_moment(black_box(&pair)).unwrap()));
    group.finish();
}

fn gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram 8 images 16x16");
    group.sample_size(10);
    let data = random_images(8, 3, &[16, 16], 2);
    let opts = |l: Option<f64>| ArchOptions {
        lengthscale: l,
        depth: Some(3),
        ..Default::default()
    };
    for (name, l) in [("pooled readout", None), ("independent readout", Some(1e-6))] {
        let arch = build_architecture("cnngp-7", &opts(l)).unwrap();
        group.bench_with_input(BenchmarkId::new("cnngp depth 3", name), &arch, |b, arch| {
            b.iter(|| gram_matrix(black_box(&data), arch).unwrap())
        });
    }
    let arch = build_architecture("cnngp-7", &opts(None)).unwrap();
    let patch = arch.collapse_geometry().patch().clone();
    let finals: Vec<_> = [1e-3, 17.0, 1e5]
        .iter()
        .map(|&l| WeightCovariance::build(CovKind::matern32(l), &patch).unwrap())
        .collect();
    group.bench_function("three readouts, shared prefix", |b| {
        b.iter(|| gram_matrices(black_box(&data), &arch, &finals).unwrap())
    });
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let arch = build_architecture("toy-1d", &ArchOptions::default()).unwrap();
    let inputs = random_images(6, 3, &[6], 3);
    let mut group = c.benchmark_group("finite network, 6 inputs");
    for width in [64, 256] {
        let net = FiniteNet::new(&arch, 3, width, 16).unwrap();
        let mut w = net.empty_weights();
        let mut sample = 0;
        group.bench_with_input(BenchmarkId::new("sample and forward", width), &width, |b, _| {
            b.iter(|| {
                sample += 1;
                net.sample_into(7, sample, &mut w);
                net.forward_batch(w.banks(), black_box(&inputs)).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, propagation, gram, monte_carlo);
criterion_main!(benches);
