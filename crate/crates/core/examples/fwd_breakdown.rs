// quick probe — op-by-op timing of one desk-scale forward+backward
use rulex_core::model::{self, ModelConfig, TokenSequence};
use rulex_core::stimuli::VocabConfig;
use rulex_core::trainer;
use rulex_core::{dataset, stimuli, tensor::Graph};
use std::collections::BTreeMap;
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
    let params = model::init_params(&config, 3).unwrap();
    let targets: Vec<usize> = seqs.iter().map(|s| s.target).collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();

    let mut acc: BTreeMap<&'static str, f64> = BTreeMap::new();
    let iters = 50;
    for _ in 0..iters {
        let t_all = Instant::now();
        let mut g = Graph::new();
        let mut t = Instant::now();
        let mut lap = |name: &'static str, acc: &mut BTreeMap<&'static str, f64>, t: &mut Instant| {
            *acc.entry(name).or_default() += t.elapsed().as_secs_f64();
            *t = Instant::now();
        };
        let built = model::build_forward(&mut g, &params, &refs, true, None).unwrap();
        lap("1_forward_build", &mut acc, &mut t);
        let loss = g.cross_entropy_mean(built.logits, targets.clone()).unwrap();
        lap("2_loss", &mut acc, &mut t);
        g.backward(loss).unwrap();
        lap("3_backward", &mut acc, &mut t);
        *acc.entry("0_total").or_default() += t_all.elapsed().as_secs_f64();
    }
    for (k, v) in &acc {
        println!("{k}: {:.2} ms", v * 1000.0 / iters as f64);
    }
}
