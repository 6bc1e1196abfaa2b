//! Sequential against rayon execution for the two data-parallel hot loops:
//! Monte Carlo sampling of warped predictions and multistart.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use wgpro_core::exec::Execution;
use wgpro_core::gp::{KernelParams, TrainingData};
use wgpro_core::nlp::{multistart_with, MultistartOptions, NlpProblem};
use wgpro_core::warping::{sample_observations_with, ObservationWarp, SampleOptions, WarpParams, WarpedGpModel};

fn model() -> WarpedGpModel {
    let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.075).collect();
    let y: Vec<f64> = x.iter().map(|v| (2.0 * v).sin() + 0.1 * v).collect();
    let data = TrainingData::from_1d(&x, &y).unwrap();
    let warp = ObservationWarp::new(WarpParams::single(0.5, 1.5, 0.2).unwrap(), 0.0, 1.0).unwrap();
    WarpedGpModel::from_parts(warp, KernelParams::new(1.0, vec![0.7], 1e-3).unwrap(), &data).unwrap()
}

fn policies() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn sampling(c: &mut Criterion) {
    let m = model();
    let test = DMatrix::from_fn(6, 1, |i, _| 0.4 * i as f64);
    let mut g = c.benchmark_group("sample_observations");
    for (name, exec) in policies() {
        let opts = SampleOptions { exec, ..Default::default() };
        g.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, o| {
            b.iter(|| black_box(sample_observations_with(&m, &test, 100_000, 1, o).unwrap()))
        });
    }
    g.finish();
}

fn starts(c: &mut Criterion) {
    let p = NlpProblem::from_values(vec![-2.0; 4], vec![2.0; 4], |v| {
        v.iter().map(|x| (x * x - 1.0).powi(2) + 0.1 * x).sum::<f64>() + 0.05 * v[0] * v[1]
    })
    .unwrap();
    let mut g = c.benchmark_group("multistart");
    g.sample_size(10);
    for (name, exec) in policies() {
        let opts = MultistartOptions { exec, n_starts: 24, stop_hits: 24, ..Default::default() };
        g.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, o| b.iter(|| black_box(multistart_with(&p, o).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, sampling, starts);
criterion_main!(benches);
