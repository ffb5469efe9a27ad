use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use mrcosts::cluster::{kmeans, sweep_clusters, DEFAULT_RESTARTS};
use mrcosts::synth::{generate, ComponentSpec, Synthetic};
use mrcosts::varpro::{init_eigenvalues, varpro_solve};
use mrcosts::{
    fit, fit_level, global_separation, BandCount, EigConstraint, LevelConfig, VarproSettings,
};

fn record(n_space: usize, n_time: usize) -> Synthetic {
    let comps = [
        ComponentSpec::traveling(1.0 / 200.0, 1.0, 1.0),
        ComponentSpec::traveling(1.0 / 40.0, 0.7, 2.0),
        ComponentSpec::traveling(1.0 / 8.0, 0.5, 3.0),
    ];
    generate(&comps, n_space, n_time, 1.0, 0.2, 1).unwrap()
}

fn varpro(c: &mut Criterion) {
    let syn = record(32, 256);
    let constraint = EigConstraint::new(0.05).unwrap();
    for (length, r) in [(64usize, 4usize), (256, 8)] {
        let mut x = syn.data.values().columns(0, length).into_owned();
        let mean = x.column_mean();
        for mut col in x.column_iter_mut() {
            col -= &mean;
        }
        let t: Vec<f64> = (0..length).map(|i| i as f64).collect();
        let init = init_eigenvalues(&x, &t, r).unwrap();
        let settings = VarproSettings::new(r);
        c.bench_function(&format!("varpro_solve {length} samples r={r}"), |b| {
            b.iter(|| varpro_solve(black_box(&x), &t, &init, &settings, &constraint).unwrap())
        });
    }
}

fn level(c: &mut Criterion) {
    let syn = record(32, 1024);
    let mut group = c.benchmark_group("fit_level");
    group.sample_size(10);
    for window in [16usize, 64] {
        let config = LevelConfig::new(window, 8, 1.0);
        group.bench_function(format!("window {window}"), |b| {
            b.iter(|| fit_level(black_box(&syn.data), &config, 0, 0).unwrap())
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let syn = record(16, 1024);
    let configs: Vec<LevelConfig> = [16, 64]
        .iter()
        .map(|&w| LevelConfig::new(w, 6, 1.0))
        .collect();
    let model = fit(&syn.data, &configs, 0).unwrap();
    c.bench_function("global_separation auto", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| global_separation(&mut m, BandCount::Auto, (2, 8), 0).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let values: Vec<f64> = (0..3000)
        .map(|i| (i % 3) as f64 + (i as f64 * 0.618).fract() * 0.2)
        .collect();
    c.bench_function("kmeans k=3 n=3000", |b| {
        b.iter(|| kmeans(black_box(&values), 3, 0, DEFAULT_RESTARTS).unwrap())
    });
    c.bench_function("sweep k=2..8 n=3000", |b| {
        b.iter(|| sweep_clusters(black_box(&values), 2, 8, 0, DEFAULT_RESTARTS).unwrap())
    });
}

criterion_group!(benches, varpro, level, clustering);
criterion_main!(benches);
