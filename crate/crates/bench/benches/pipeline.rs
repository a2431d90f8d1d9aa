use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dspnet::geometry::{correspondences, fps, Camera};
use dspnet::model::{evaluate_sample, init_params, prepare, sample_gradient};
use dspnet::scenegen::encoders::PointSampling;
use dspnet::scenegen::{generate_scene, samples_of, SceneSample};
use dspnet::RunConfig;

fn desk_sample(m: usize) -> (RunConfig, SceneSample) {
    let mut c = RunConfig::default();
    c.dims.m = m;
    let sample = samples_of(generate_scene(7, &c).unwrap()).swap_remove(0);
    (c, sample)
}

fn geometry(c: &mut Criterion) {
    let (config, sample) = desk_sample(4);
    let xyz = sample.scene.xyz();
    c.bench_function("fps 2048 -> 512", |b| b.iter(|| fps(black_box(&xyz), 512, 0).unwrap()));
    let prep = prepare(&sample, &config, PointSampling::Inference).unwrap();
    let views: Vec<(&Camera, &_)> = sample.scene.views.iter().map(|v| (&v.camera, &v.depth)).collect();
    c.bench_function("correspondences 512 x 4 views", |b| {
        b.iter(|| correspondences(black_box(&prep.coords), &views, config.data.depth_tol).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (config, sample) = desk_sample(4);
    let params = init_params(&config.dims, 1).unwrap();
    let prep = prepare(&sample, &config, PointSampling::Inference).unwrap();
    let mut group = c.benchmark_group("desk model");
    group.sample_size(10);
    group.bench_function("forward", |b| b.iter(|| evaluate_sample(&params, &config, black_box(&prep)).unwrap()));
    group.bench_function("forward + backward", |b| {
        b.iter(|| sample_gradient(&params, &config, black_box(&prep)).unwrap())
    });
    group.finish();
}

fn views(c: &mut Criterion) {
    let (config, sample) = desk_sample(20);
    let params = init_params(&config.dims, 1).unwrap();
    let mut group = c.benchmark_group("inference vs views");
    group.sample_size(10);
    for m in [10, 15, 20] {
        let mut cm = config.clone();
        cm.dims.m = m;
        group.bench_with_input(BenchmarkId::from_parameter(m), &cm, |b, cm| {
            b.iter(|| {
                let prep = prepare(&sample, cm, PointSampling::Inference).unwrap();
                evaluate_sample(&params, cm, &prep).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, geometry, model, views);
criterion_main!(benches);
