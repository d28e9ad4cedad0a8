use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use formcast_bench::{midpoint, samples, settings, thinning_net, RES};
use formcast_core::config::PipelineConfig;
use formcast_core::dataset::Sample;
use formcast_core::oracle::simulate;
use formcast_core::raster_input::build_input;
use formcast_core::tensor::Tensor;
use formcast_core::train::{TargetKind, TrainConfig, Trainer};

fn forward(c: &mut Criterion) {
    let net = thinning_net();
    let x = Tensor::from_fn(&[1, 4, RES, RES], |i| (i as f32 * 1e-3).sin());
    c.bench_function("forward_64", |b| b.iter(|| net.predict(black_box(&x)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let data = samples(4);
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let cfg = TrainConfig {
        batch_size: batch.len(),
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(
        PipelineConfig::reference(RES).net_for(TargetKind::Thinning),
        TargetKind::Thinning,
        cfg,
    )
    .unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step_batch4_64", |b| b.iter(|| t.step(black_box(&batch)).unwrap()));
    g.finish();
}

fn inputs(c: &mut Criterion) {
    let s = settings();
    let pv = midpoint();
    let grid = s.grid().unwrap();
    c.bench_function("build_input_64", |b| {
        b.iter(|| build_input(black_box(&pv), &s.bounds, grid, s.cloud_spacing_mm, 0).unwrap())
    });
    let mut g = c.benchmark_group("oracle");
    g.sample_size(20);
    g.bench_function("simulate", |b| {
        b.iter(|| simulate(black_box(&pv), &s.bounds, &s.oracle, s.mesh_spacing_mm, 0).unwrap())
    });
    g.finish();
}

criterion_group!(benches, forward, train_step, inputs);
criterion_main!(benches);
