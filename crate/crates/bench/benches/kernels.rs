use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use r2d2::datagen::{synthesize_pair, PairConfig, SceneKind, SceneMix, TrainingPair};
use r2d2::kernels;
use r2d2::losses::{soft_ap, total_loss};
use r2d2::{
    extract_keypoints, mutual_nn_match, AblationMode, ExtractConfig, Keypoint, KeypointSet, LossConfig,
    Network, NetworkConfig, Tape, Tensor, DESCRIPTOR_DIM,
};

fn wave(shape: &[usize], phase: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 * 0.37 + phase).sin() * 0.5) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn toy_pair(crop: usize) -> TrainingPair {
    let cfg = PairConfig {
        scene_size: crop + crop / 3,
        crop_size: crop,
        scene_mix: SceneMix::only(SceneKind::CheckerboardTriangle),
        ..PairConfig::default()
    };
    synthesize_pair(&cfg, 5).unwrap()
}

fn conv(c: &mut Criterion) {
    let input = wave(&[96, 96, 32], 0.0);
    let bias = Tensor::zeros([32]);
    let k3 = wave(&[32, 3, 3, 32], 1.0);
    let k2 = wave(&[32, 2, 2, 32], 2.0);
    c.bench_function("conv2d 3x3 96x96x32->32", |b| b.iter(|| kernels::conv2d(black_box(&input), &k3, &bias, 2).unwrap()));
    c.bench_function("conv2d 2x2 96x96x32->32", |b| b.iter(|| kernels::conv2d(black_box(&input), &k2, &bias, 4).unwrap()));
}

fn forward(c: &mut Criterion) {
    let image = toy_pair(96).image1;
    let toy = Network::<f32>::new(NetworkConfig::toy()).unwrap();
    let base = Network::<f32>::new(NetworkConfig::base()).unwrap();
    c.bench_function("infer toy 96x96", |b| b.iter(|| toy.infer_generic(black_box(&image)).unwrap()));
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("infer base 96x96", |b| b.iter(|| base.infer_generic(black_box(&image)).unwrap()));
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let pair = toy_pair(96);
    let network = Network::<f32>::new(NetworkConfig::toy()).unwrap();
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("toy pair forward+loss+backward 96x96", |b| {
        b.iter_batched(
            || (pair.image1.clone(), pair.image2.clone()),
            |(i1, i2)| {
                let mut tape = Tape::new();
                let vars = network.register(&mut tape, true);
                let (i1, i2) = (tape.constant(i1), tape.constant(i2));
                let o1 = network.forward(&mut tape, &vars, i1).unwrap();
                let o2 = network.forward(&mut tape, &vars, i2).unwrap();
                let loss = total_loss(&mut tape, &o1, &o2, &pair.field, &cfg, AblationMode::Full).unwrap();
                tape.backward(loss.total).unwrap();
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn losses(c: &mut Criterion) {
    let n = 300;
    let distances: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 * 2.0 / n as f64).collect();
    let positives: Vec<bool> = (0..n).map(|i| i % 50 == 0).collect();
    c.bench_function("soft_ap 300 entries", |b| b.iter(|| soft_ap(black_box(&distances), &positives, 25).unwrap()));
}

fn keypoints(count: usize, phase: f64) -> KeypointSet {
    let keypoints = (0..count)
        .map(|i| {
            let mut d: Vec<f32> = (0..DESCRIPTOR_DIM).map(|k| ((i * 31 + k) as f64 * 0.11 + phase).sin() as f32).collect();
            let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            Keypoint {
                x: (i % 100) as f32,
                y: (i / 100) as f32,
                scale: 1.0,
                score: 1.0,
                descriptor: d,
            }
        })
        .collect();
    KeypointSet {
        keypoints,
        width: 100,
        height: 100,
    }
}

fn matching_and_extraction(c: &mut Criterion) {
    let (a, b) = (keypoints(1000, 0.0), keypoints(1000, 0.3));
    c.bench_function("mutual_nn 1000x1000", |bn| bn.iter(|| mutual_nn_match(black_box(&a), &b).unwrap()));

    let image = toy_pair(160).image1;
    let network = Network::<f32>::new(NetworkConfig::toy()).unwrap();
    let cfg = ExtractConfig {
        repeatability_threshold: 0.0,
        reliability_threshold: 0.0,
        ..ExtractConfig::default()
    };
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("extract toy 160x160", |bn| bn.iter(|| extract_keypoints(black_box(&image), &network, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, forward, training_step, losses, matching_and_extraction);
criterion_main!(benches);
