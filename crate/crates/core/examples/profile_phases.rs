// quick probe — where does the step go
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
    let targets: Vec<usize> = seqs.iter().map(|s| s.target).collect();
    let n = 100;

    // forward only, no grad
    let t0 = Instant::now();
    for _ in 0..n {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mut graph = Graph::new();
        let built = model::build_forward(&mut graph, &params, &refs, false, None).unwrap();
        std::hint::black_box(graph.data(built.logits));
    }
    println!("forward only:        {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // forward trainable (adds param clones)
    let t0 = Instant::now();
    for _ in 0..n {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mut graph = Graph::new();
        let built = model::build_forward(&mut graph, &params, &refs, true, None).unwrap();
        let loss = graph.cross_entropy_mean(built.logits, targets.clone()).unwrap();
        std::hint::black_box(graph.scalar_value(loss));
    }
    println!("forward + loss:      {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // + backward
    let t0 = Instant::now();
    for _ in 0..n {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mut graph = Graph::new();
        let built = model::build_forward(&mut graph, &params, &refs, true, None).unwrap();
        let loss = graph.cross_entropy_mean(built.logits, targets.clone()).unwrap();
        graph.backward(loss).unwrap();
        std::hint::black_box(graph.grad(built.param_nodes[0]));
    }
    println!("forward + backward:  {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // adam alone
    let mut adam = AdamState::new(params.num_params());
    let grads = vec![1e-4f32; params.num_params()];
    let t0 = Instant::now();
    for _ in 0..n {
        trainer::adam_step(&mut params, &grads, &mut adam, 3e-4).unwrap();
    }
    println!("adam:                {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
