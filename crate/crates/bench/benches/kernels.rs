use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regalign_bench::fixture;
use regalign_core::distsim::{parallel_train_step, Replica};
use regalign_core::encoder::FeatureGrid;
use regalign_core::losses::{MarginState, Stage};
use regalign_core::model::ObjectiveOptions;
use regalign_core::numerics::{cosine_similarity_matrix, Tensor};
use regalign_core::region::{roi_align, BBox, RoiConfig};
use regalign_core::Sample;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cosine(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("cosine_similarity_matrix");
    for n in [32, 128] {
        let a = random(&mut rng, &[n, 16]);
        let b = random(&mut rng, &[n, 16]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| cosine_similarity_matrix(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn roi(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = FeatureGrid::new(8, 8, random(&mut rng, &[64, 16])).unwrap();
    let bbox = BBox::new(0.1, 0.2, 0.7, 0.9).unwrap();
    let cfg = RoiConfig { out_h: 2, out_w: 2, samples: 2 };
    c.bench_function("roi_align 8x8 2x2", |b| b.iter(|| roi_align(black_box(&grid), &bbox, &cfg).unwrap()));
}

fn encoders(c: &mut Criterion) {
    let (corpus, model) = fixture(1);
    let s = &corpus[0];
    c.bench_function("embed_image 8x8", |b| b.iter(|| model.embed_image(black_box(s)).unwrap()));
    c.bench_function("embed_text", |b| b.iter(|| model.embed_text(black_box(&s.long_caption)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let (corpus, model) = fixture(16);
    let batch: Vec<&Sample> = corpus.iter().collect();
    let mut group = c.benchmark_group("parallel_train_step");
    group.sample_size(20);
    for (stage, k) in [(Stage::One, 1), (Stage::Two, 1), (Stage::Two, 4)] {
        let replicas = vec![Replica { model: model.clone(), margins: MarginState::default() }; k];
        let opts = ObjectiveOptions::stage(stage);
        let id = format!("stage{}-K{k}", u8::from(stage));
        group.bench_function(id, |b| b.iter(|| parallel_train_step(&replicas, black_box(&batch), &opts).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, cosine, roi, encoders, train_step);
criterion_main!(benches);
