//! Diagnostic probe (ignored by default): measures the finite-difference
//! noise floor of the f32 pipeline at several step sizes. Run with
//! `cargo test -p rulex-core --test fd_probe -- --ignored --nocapture`.

use rand::Rng;
use rulex_core::gradcheck::central_differences;
use rulex_core::model::{self, ModelConfig, TokenSequence};
use rulex_core::rng::{rng_for, stream};
use rulex_core::tensor::Graph;

#[test]
#[ignore]
fn probe_noise_floor_across_step_sizes() {
    let config = ModelConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 4,
        max_seq_len: 9,
        ..ModelConfig::default()
    };
    let mut rng = rng_for(106, stream::ORACLE, 0);
    let seqs: Vec<TokenSequence> = (0..2)
        .map(|_| {
            let stims: Vec<Vec<f32>> = (0..4)
                .map(|_| (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let context: Vec<(&[f32], usize)> = stims[..3]
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_slice(), i % 3))
                .collect();
            TokenSequence::from_pairs(&context, &stims[3], 1, &config).unwrap()
        })
        .collect();
    let params = model::init_params(&config, 7).unwrap();
    let targets: Vec<usize> = seqs.iter().map(|s| s.target).collect();
    let seq_refs: Vec<&TokenSequence> = seqs.iter().collect();

    let mut graph = Graph::new();
    let built = model::build_forward(&mut graph, &params, &seq_refs, true, None).unwrap();
    let loss = graph
        .cross_entropy_mean(built.logits, targets.clone())
        .unwrap();
    graph.backward(loss).unwrap();
    let mut analytic = Vec::with_capacity(params.num_params());
    for node in &built.param_nodes {
        analytic.extend_from_slice(graph.grad(*node).expect("populated"));
    }
    println!("loss {}", graph.scalar_value(loss));

    let flat0 = params.to_flat();
    let mut scratch = params.clone();
    for h in [1e-3f32, 3e-3, 1e-2, 3e-2] {
        let loss_of = |flat: &[f32]| -> f32 {
            scratch.set_from_flat(flat);
            let mut g = Graph::new();
            let b = model::build_forward(&mut g, &scratch, &seq_refs, false, None).unwrap();
            let l = g.cross_entropy_mean(b.logits, targets.clone()).unwrap();
            g.scalar_value(l)
        };
        let numeric = central_differences(loss_of, &flat0, h);
        let mut max_abs_diff = 0.0f32;
        let mut max_rel_pure = 0.0f32;
        let mut worst_tensor = String::new();
        let mut off = 0;
        for (name, tensor) in params.named() {
            let n = tensor.numel();
            let a = &analytic[off..off + n];
            let m = &numeric[off..off + n];
            let tensor_max_diff = a
                .iter()
                .zip(m)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            let ginf = a.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
            if tensor_max_diff > max_abs_diff {
                max_abs_diff = tensor_max_diff;
                worst_tensor = format!("{name} (|g|inf {ginf:.3e})");
            }
            for (x, y) in a.iter().zip(m) {
                let denom = x.abs().max(y.abs());
                if denom > 1e-4 {
                    max_rel_pure = max_rel_pure.max((x - y).abs() / denom);
                }
            }
            off += n;
        }
        println!(
            "h={h:.0e}: max |a-n| {max_abs_diff:.3e} ({worst_tensor}), max pure rel (denom>1e-4) {max_rel_pure:.3e}"
        );
        // Coordinates with sizable gradients: how tight can rtol be?
        for g_min in [0.01f32, 0.05, 0.2] {
            let mut worst = 0.0f32;
            for (a, m) in analytic.iter().zip(&numeric) {
                if a.abs().max(m.abs()) >= g_min {
                    worst = worst.max((a - m).abs() / a.abs().max(m.abs()));
                }
            }
            println!("    |g|>={g_min}: worst rel {worst:.3e}");
        }
    }
}
