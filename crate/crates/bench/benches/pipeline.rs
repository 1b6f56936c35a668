use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use msmatch_bench::{correspondences, scene};
use msmatch_core::adaptation::{run_adaptation, AdaptationConfig, ShiTomasiDetector};
use msmatch_core::datahub::{make_train_sample, SampleConfig};
use msmatch_core::evaluation::{DetectConfig, FeatureExtractor, ModelExtractor};
use msmatch_core::matching::{mutual_nn_match, robust_homography, RobustFitConfig};
use msmatch_core::network::{Model, ModelConfig};
use msmatch_core::training::{train_step, Adam, AdamConfig};
use msmatch_core::{Homography, KeypointSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geometry(c: &mut Criterion) {
    let h = Homography::from_row_major([0.95, 0.1, 4.0, -0.08, 1.02, -3.0, 2e-4, -1e-4, 1.0]).unwrap();
    let (a, b, m) = correspondences(&h, 200, 100);
    let cfg = RobustFitConfig::default();
    c.bench_function("robust_homography 200 matches 50% inliers", |bench| {
        bench.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            robust_homography(black_box(&a), &b, &m, &cfg, &mut rng).unwrap()
        })
    });
    let da: Vec<Vec<f64>> = (0..500).map(|i| (0..64).map(|k| ((i * 31 + k * 17) % 97) as f64).collect()).collect();
    let db: Vec<Vec<f64>> = da.iter().rev().cloned().collect();
    c.bench_function("mutual_nn_match 500x500 d64", |bench| bench.iter(|| mutual_nn_match(black_box(&da), &db)));
}

fn labeling(c: &mut Criterion) {
    let pair = scene(64);
    let cfg = AdaptationConfig {
        n_homographies: 10,
        ..AdaptationConfig::default()
    };
    let det = ShiTomasiDetector::default();
    let mut group = c.benchmark_group("adaptation");
    group.sample_size(10);
    group.bench_function("64x64 N_h=10", |bench| {
        bench.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            run_adaptation(&pair.image_a, &pair.image_b, &det, &cfg, &mut rng).unwrap()
        })
    });
    group.finish();
}

fn network(c: &mut Criterion) {
    let pair = scene(128);
    let model = Model::new(ModelConfig::toy(), 0).unwrap();
    let ex = ModelExtractor {
        model: &model,
        detect: DetectConfig::default(),
    };
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("extract 128x128", |bench| bench.iter(|| ex.extract(black_box(&pair.image_a)).unwrap()));

    let kps = KeypointSet::new(Vec::new());
    let cfg = SampleConfig {
        crop: 64,
        ..SampleConfig::default()
    };
    group.bench_function("train_step batch 2 crop 64", |bench| {
        bench.iter_batched(
            || {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let batch: Vec<_> = (0..2).map(|_| make_train_sample(&pair, &kps, &cfg, &mut rng).unwrap()).collect();
                (Model::new(ModelConfig::toy(), 0).unwrap(), batch)
            },
            |(mut m, batch)| {
                let mut adam = Adam::new(AdamConfig::default());
                train_step(&mut m, &mut adam, &batch, &Default::default(), 1, 9).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, geometry, labeling, network);
criterion_main!(benches);
