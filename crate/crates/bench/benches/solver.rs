use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layergrad::linalg::modified_gram_schmidt;
use layergrad::memory::update_memory;
use layergrad::{
    concatenated_solve, layerwise_solve, solve_update, tasks, Coreset, FlatVector, GradientBundle,
    LayerGranularity, MemoryPolicy, MlpModel, SolverConfig, UpdateMode, DEFAULT_RANK_TOL,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> FlatVector {
    (0..n)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f64>>()
        .into()
}

fn random_bundle(dim: usize, memories: usize, seed: u64) -> GradientBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(&mut rng, dim);
    let old = (0..memories).map(|_| gaussian(&mut rng, dim)).collect();
    GradientBundle::new(g, old).expect("consistent sizes")
}

fn closed_form(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_update");
    for &(dim, memories) in &[(1_000, 4), (13_703, 4), (13_703, 19)] {
        let bundle = random_bundle(dim, memories, 1);
        let shared = bundle.shared.clone().expect("memories present");
        let basis = modified_gram_schmidt(&bundle.specific, DEFAULT_RANK_TOL);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{dim}x{memories}")),
            &(),
            |b, _| b.iter(|| solve_update(black_box(&bundle.new_grad), &shared, &basis).unwrap()),
        );
    }
    group.finish();
}

fn basis(c: &mut Criterion) {
    let mut group = c.benchmark_group("modified_gram_schmidt");
    for &memories in &[4, 19] {
        let bundle = random_bundle(13_703, memories, 2);
        group.bench_with_input(
            BenchmarkId::from_parameter(memories),
            &bundle,
            |b, bundle| {
                b.iter(|| modified_gram_schmidt(black_box(&bundle.specific), DEFAULT_RANK_TOL))
            },
        );
    }
    group.finish();
}

/// Real gradients from a 32-100-100-3 network after 19 tasks of memory.
fn concatenated_vs_layerwise(c: &mut Criterion) {
    let seed = 1;
    let base = tasks::gen_synthetic_base(3, 32, 250, seed).unwrap();
    let stream = tasks::gen_permuted_tasks(&base, 20, seed).unwrap();
    let mut group = c.benchmark_group("update");
    for granularity in [LayerGranularity::Fused, LayerGranularity::PerTensor] {
        let model = MlpModel::new(&[32, 100, 100, 3], seed, granularity).unwrap();
        let mut coreset = Coreset::new();
        for (t, task) in stream.tasks.iter().enumerate().take(19) {
            coreset
                .push(update_memory(t, &task.train, 256, MemoryPolicy::RingLast, 0).unwrap())
                .unwrap();
        }
        let first = |batch: &layergrad::Batch, n: usize| batch.select(&(0..n).collect::<Vec<_>>());
        let (_, g) = model
            .loss_and_grad(&first(&stream.tasks[19].train, 10), None)
            .unwrap();
        let old = coreset
            .memories()
            .iter()
            .map(|m| model.loss_and_grad(&first(&m.items, 20), None).unwrap().1)
            .collect();
        let bundle = GradientBundle::new(g, old).unwrap();
        let layout = model.layout().clone();
        let concat = SolverConfig::default();
        let layerwise = SolverConfig {
            mode: UpdateMode::Layerwise,
            ..SolverConfig::default()
        };
        let tag = format!("{granularity:?}").to_lowercase();
        group.bench_function(format!("concatenated/{tag}"), |b| {
            b.iter(|| concatenated_solve(black_box(&bundle), &concat).unwrap())
        });
        group.bench_function(format!("layerwise/{tag}"), |b| {
            b.iter(|| layerwise_solve(black_box(&bundle), &layout, &layerwise).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, closed_form, basis, concatenated_vs_layerwise);
criterion_main!(benches);
