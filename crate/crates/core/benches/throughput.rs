//! Throughput benches for the data-parallel inner loops. Run with the
//! default features for the rayon path and with `--no-default-features`
//! for the sequential fallback; group names carry the mode so reports from
//! both runs can sit side by side.

use criterion::{criterion_group, criterion_main, Criterion};

use rulex_core::model::{self, ModelConfig, TokenSequence};
use rulex_core::stimuli::{self, VocabConfig};
use rulex_core::tensor::{Graph, Tensor};
use rulex_core::trainer::{self, AdamState, TrainConfig};
use rulex_core::{dataset, rng};

const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

fn desk_model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        ..ModelConfig::default()
    }
}

fn batch_sequences(n: usize) -> (ModelConfig, Vec<TokenSequence>) {
    let config = desk_model();
    let vocab = stimuli::build_vocab(&VocabConfig::default(), 1).unwrap();
    let seqs: Vec<TokenSequence> = (0..n)
        .map(|i| {
            let ex = dataset::generate_example(dataset::GenRegime::Fewshot, &vocab, 1, i as u64)
                .unwrap();
            trainer::to_token_sequence(&ex, &config).unwrap()
        })
        .collect();
    (config, seqs)
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("matmul/{MODE}"));
    for (m, k, n) in [(800, 64, 64), (800, 64, 256), (800, 256, 64)] {
        let mut rng = rng::rng_for(7, rng::stream::ORACLE, 0);
        let a = Tensor::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 1.0, &mut rng);
        group.bench_function(format!("{m}x{k}x{n}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let a = g.input(a.clone());
                let b = g.input(b.clone());
                std::hint::black_box(g.matmul(a, b).unwrap());
            })
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let (config, seqs) = batch_sequences(32);
    let mut params = model::init_params(&config, 3).unwrap();
    let mut adam = AdamState::new(params.num_params());
    let targets: Vec<usize> = seqs.iter().map(|s| s.target).collect();
    let mut group = c.benchmark_group(format!("train/{MODE}"));
    group.sample_size(20);
    group.bench_function("step_desk_scale_batch32", |bench| {
        bench.iter(|| {
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let mut graph = Graph::new();
            let built =
                model::build_forward(&mut graph, &params, &refs, true, None).unwrap();
            let loss = graph
                .cross_entropy_mean(built.logits, targets.clone())
                .unwrap();
            graph.backward(loss).unwrap();
            let mut grads = vec![0.0f32; params.num_params()];
            let mut off = 0;
            for node in &built.param_nodes {
                let g = graph.grad(*node).unwrap();
                grads[off..off + g.len()].copy_from_slice(g);
                off += g.len();
            }
            adam_step_wrapper(&mut params, &grads, &mut adam);
        })
    });
    group.finish();
}

fn adam_step_wrapper(params: &mut model::ModelParams, grads: &[f32], adam: &mut AdamState) {
    trainer::adam_step(params, grads, adam, 3e-4).unwrap();
}

fn bench_eval_batch(c: &mut Criterion) {
    let (config, seqs) = batch_sequences(256);
    let params = model::init_params(&config, 4).unwrap();
    let mut group = c.benchmark_group(format!("eval/{MODE}"));
    group.sample_size(20);
    group.bench_function("predict_256_episodes", |bench| {
        bench.iter(|| std::hint::black_box(trainer::predict_batch(&params, &seqs, 32).unwrap()))
    });
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let vocab = stimuli::build_vocab(&VocabConfig::default(), 9).unwrap();
    let mut group = c.benchmark_group(format!("gen/{MODE}"));
    group.bench_function("fewshot_1000", |bench| {
        bench.iter(|| {
            for e in 0..1000u64 {
                std::hint::black_box(
                    dataset::generate_example(dataset::GenRegime::Fewshot, &vocab, 9, e).unwrap(),
                );
            }
        })
    });
    group.finish();
}

fn noop(_c: &mut Criterion) {
    // TrainConfig is exercised here only to keep the bench focused on the
    // numeric paths; full runs live in the acceptance suite.
    let _ = TrainConfig::default();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_train_step,
    bench_eval_batch,
    bench_generation,
    noop
);
criterion_main!(benches);
