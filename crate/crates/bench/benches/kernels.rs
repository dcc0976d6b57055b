use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthpose::adapters::{domora_forward, init_adapter, CompressionScheme, FrozenLinear};
use depthpose::geometry::AxisAngle;
use depthpose::losses::{ms_ssim, reprojection_loss};
use depthpose::pipeline::{generate_scene, train_step, Adam, SceneKind, TrainConfig};
use depthpose::nets::Model;
use depthpose::warp::synthesize_view;
use depthpose::PoseSE3;

fn adapted_linear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, k, r) = (64, 64, 8);
    let layer = FrozenLinear::new(DMatrix::from_fn(d, k, |_, _| rng.random_range(-0.2..0.2))).unwrap();
    let mut p = init_adapter(&layer, r, 1).unwrap();
    p.b = DMatrix::from_fn(d, r, |_, _| rng.random_range(-0.05..0.05));
    p.square = DMatrix::from_fn(r, r, |_, _| rng.random_range(-0.05..0.05));
    let x = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let scheme = CompressionScheme::truncation_sum();
    c.bench_function("domora_forward_64x64_r8", |b| {
        b.iter(|| domora_forward(&layer, &p, &x, &scheme).unwrap())
    });
}

fn warp_and_loss(c: &mut Criterion) {
    let scene = generate_scene(0, SceneKind::TexturedPlane);
    let pose = PoseSE3::from_axis_angle(AxisAngle::new(0.01, -0.02, 0.005), Vector3::new(0.03, 0.0, 0.01));
    let (src, tgt, depth) = (&scene.frames[0], &scene.frames[1], &scene.depths[1]);
    c.bench_function("synthesize_view_64", |b| {
        b.iter(|| synthesize_view(src, depth, &scene.intrinsics, &pose).unwrap())
    });
    let cfg = TrainConfig::default();
    let (synth, mask) = synthesize_view(src, depth, &scene.intrinsics, &pose).unwrap();
    c.bench_function("ms_ssim_64", |b| b.iter(|| ms_ssim(tgt, &synth, &cfg.loss).unwrap()));
    c.bench_function("reprojection_loss_64", |b| {
        b.iter(|| reprojection_loss(tgt, &synth, &mask, &cfg.loss).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let scene = generate_scene(cfg.scene_seed, cfg.scene_kind);
    let model = Model::build(&cfg.net, cfg.seed).unwrap();
    let batch: Vec<_> = (0..cfg.batch_size)
        .map(|i| (scene.frames[i].clone(), scene.frames[i + 1].clone()))
        .collect();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_default_batch", |b| {
        b.iter_batched(
            || (model.clone(), Adam::new()),
            |(mut m, mut adam)| {
                train_step(&mut m, &mut adam, &batch, &scene.intrinsics, &cfg.loss, cfg.learning_rate, 0).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, adapted_linear, warp_and_loss, training_step);
criterion_main!(benches);
