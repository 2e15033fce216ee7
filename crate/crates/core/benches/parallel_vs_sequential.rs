use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use vsg_core::adv::{cluster_frames, AdvConfig};
use vsg_core::eval::{recall_at_k_with, EvalConfig, EvalInstance};
use vsg_core::exec::Execution;
use vsg_core::model::{BoundingBox, EmbeddingMatrix, Provenance, Triplet};

const CLASSES: [&str; 6] = ["person", "cup", "sofa", "book", "door", "table"];
const PREDICATES: [&str; 5] = ["holding", "looking at", "sitting on", "touching", "not contacting"];

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
    BoundingBox::new(x, y, x + rng.random_range(5.0..40.0), y + rng.random_range(5.0..40.0)).unwrap()
}

fn random_triplet(rng: &mut ChaCha8Rng, provenance: Provenance) -> Triplet {
    let mut t = Triplet::unlocalized(
        CLASSES[0],
        PREDICATES[rng.random_range(0..PREDICATES.len())],
        CLASSES[rng.random_range(1..CLASSES.len())],
        provenance,
    );
    t.subject_box = Some(random_box(rng));
    t.object_box = Some(random_box(rng));
    t.score = Some(rng.random());
    t
}

fn instances(frames: usize) -> Vec<EvalInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..frames)
        .map(|f| EvalInstance {
            video_id: format!("v{}", f / 32),
            frame_index: (f % 32) as u32 + 1,
            gt: (0..4)
                .map(|_| random_triplet(&mut rng, Provenance::GroundTruth))
                .collect(),
            predictions: (0..100)
                .map(|_| random_triplet(&mut rng, Provenance::Prediction))
                .collect(),
        })
        .collect()
}

fn videos(count: usize, frames: usize, dim: usize) -> Vec<EmbeddingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..count)
        .map(|_| {
            let ids = (1..=frames).map(|i| i.to_string()).collect();
            let data = (0..frames * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            EmbeddingMatrix::new(ids, dim, data).unwrap()
        })
        .collect()
}

fn bench_recall(c: &mut Criterion) {
    let data = instances(2_000);
    let config = EvalConfig::default();
    let mut group = c.benchmark_group("recall_at_k");
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| recall_at_k_with(black_box(&data), &config, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_clustering(c: &mut Criterion) {
    let data = videos(32, 120, 64);
    let config = AdvConfig::default();
    let mut group = c.benchmark_group("cluster_frames");
    group.sample_size(20);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| exec.map(black_box(&data), |m| cluster_frames(m, &config).unwrap().k))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_recall, bench_clustering);
criterion_main!(benches);
