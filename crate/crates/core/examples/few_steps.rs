// quick probe — a few full steps for profiling
use rulex_core::model::{self, ModelConfig, TokenSequence};
use rulex_core::stimuli::VocabConfig;
use rulex_core::trainer::{self, AdamState};
use rulex_core::{dataset, stimuli, tensor::Graph};

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
    for _ in 0..5 {
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
    println!("done");
}
