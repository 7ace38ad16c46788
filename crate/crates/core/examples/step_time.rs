// quick probe — step time at desk scale
use rulex_core::model::{self, ModelConfig, TokenSequence};
use rulex_core::stimuli::VocabConfig;
use rulex_core::trainer::{self, AdamState};
use rulex_core::{dataset, stimuli, tensor::Graph};
use std::time::Instant;

fn main() {
    let config = ModelConfig { num_layers: 2, ..ModelConfig::default() };
    let vocab = stimuli::build_vocab(&VocabConfig::default(), 1).unwrap();
    let seqs: Vec<TokenSequence> = (0..32)
        .map(|i| {
            let ex = dataset::generate_example(dataset::GenRegime::Fewshot, &vocab, 1, i).unwrap();
            trainer::to_token_sequence(&ex, &config).unwrap()
        })
        .collect();
    let mut params = model::init_params(&config, 3).unwrap();
    let mut adam = AdamState::new(params.num_params());
    let targets: Vec<usize> = seqs.iter().map(|s| s.target).collect();
    let mut grads = vec![0.0f32; params.num_params()];
    // warmup + timed
    for phase in 0..2 {
        let n = if phase == 0 { 20 } else { 200 };
        let t0 = Instant::now();
        for _ in 0..n {
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let mut graph = Graph::new();
            let built = model::build_forward(&mut graph, &params, &refs, true, None).unwrap();
            let loss = graph.cross_entropy_mean(built.logits, targets.clone()).unwrap();
            graph.backward(loss).unwrap();
            let mut off = 0;
            for node in &built.param_nodes {
                let g = graph.grad(*node).unwrap();
                grads[off..off + g.len()].copy_from_slice(g);
                off += g.len();
            }
            trainer::adam_step(&mut params, &grads, &mut adam, 3e-4).unwrap();
        }
        if phase == 1 {
            let dt = t0.elapsed();
            println!("step time: {:.2} ms  ({} steps in {:?})", dt.as_secs_f64() * 1000.0 / n as f64, n, dt);
            println!("30k steps -> {:.1} min", dt.as_secs_f64() / n as f64 * 30000.0 / 60.0);
        }
    }
    // data generation cost
    let t0 = Instant::now();
    for i in 0..32 * 50u64 {
        let ex = dataset::generate_example(dataset::GenRegime::Fewshot, &vocab, 2, i).unwrap();
        let _ = trainer::to_token_sequence(&ex, &config).unwrap();
    }
    println!("datagen per batch of 32: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);
}
