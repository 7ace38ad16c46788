//! Finite-difference verification of every differentiable operation and of
//! the full model backward pass.
//!
//! The numeric side only calls public forward APIs; the analytic side is
//! one `backward` sweep. Comparisons use a relative error with a small
//! absolute floor on the denominator: the f32 pipeline gives the central
//! difference itself an absolute noise floor around `ulp(loss)/(2h)`, so a
//! pure relative comparison on near-zero coordinates would only measure
//! that noise, not the backward pass.

use rand::Rng;
use rulex_core::gradcheck::{central_differences, compare_grads};
use rulex_core::model::{self, ModelConfig, TokenSequence};
use rulex_core::rng::{rng_for, stream};
use rulex_core::tensor::{Graph, Tensor};

/// Per-op probes: single ops are mild, so noise dominates truncation and
/// a larger step is strictly better (exact for the multilinear ops).
const H: f32 = 1e-2;
/// Full-model probe: composed nonlinearities push truncation up; 3e-3 is
/// the measured optimum for this pipeline (see fd_probe.rs).
const H_MODEL: f32 = 3e-3;
const RTOL: f32 = 1e-3;
/// Denominator floor for per-op checks on O(1) gradients.
const FLOOR: f32 = 5e-2;
/// Full-model floor: the worst coordinate over ~7.5k parameters sits near
/// the noise floor, which scales with the loss's ulp.
const FLOOR_MODEL: f32 = 1e-1;

fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum of an op output, so every output coordinate feeds the loss
/// with a distinct O(1) weight.
fn weighted_sum(g: &mut Graph, out: rulex_core::tensor::NodeId, rng: &mut impl Rng) -> f32 {
    let n: usize = g.shape(out).iter().product();
    let shape = g.shape(out).to_vec();
    let weights: Vec<f32> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = g.input(Tensor::new(shape, weights).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    g.scalar_value(loss)
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = rng_for(100, stream::ORACLE, 0);
    let a0 = randn(vec![4, 5], &mut rng);
    let b0 = randn(vec![5, 3], &mut rng);
    let mut wrng = rng_for(100, stream::ORACLE, 1);
    let weights: Vec<f32> = (0..12).map(|_| wrng.random_range(0.5..1.5)).collect();

    let loss_of = |a_data: &[f32], b_data: &[f32]| -> f32 {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![4, 5], a_data.to_vec()).unwrap());
        let b = g.input(Tensor::new(vec![5, 3], b_data.to_vec()).unwrap());
        let c = g.matmul(a, b).unwrap();
        let w = g.input(Tensor::new(vec![4, 3], weights.clone()).unwrap());
        let p = g.mul(c, w).unwrap();
        let l = g.sum(p);
        g.scalar_value(l)
    };

    let mut g = Graph::new();
    let a = g.param(a0.clone());
    let b = g.param(b0.clone());
    let c = g.matmul(a, b).unwrap();
    let w = g.input(Tensor::new(vec![4, 3], weights.clone()).unwrap());
    let p = g.mul(c, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();

    let fd_a = central_differences(|x| loss_of(x, &b0.data), &a0.data, H);
    let cmp = compare_grads(g.grad(a).unwrap(), &fd_a, FLOOR);
    assert!(cmp.max_rel_err < RTOL, "dA: {cmp:?}");
    let fd_b = central_differences(|x| loss_of(&a0.data, x), &b0.data, H);
    let cmp = compare_grads(g.grad(b).unwrap(), &fd_b, FLOOR);
    assert!(cmp.max_rel_err < RTOL, "dB: {cmp:?}");
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = rng_for(101, stream::ORACLE, 0);
    let x0 = randn(vec![3, 6], &mut rng);
    let g0 = randn(vec![6], &mut rng);
    let b0 = randn(vec![6], &mut rng);
    let mut wrng = rng_for(101, stream::ORACLE, 1);
    let weights: Vec<f32> = (0..18).map(|_| wrng.random_range(0.5..1.5)).collect();

    let loss_of = |x: &[f32], gain: &[f32], bias: &[f32]| -> f32 {
        let mut g = Graph::new();
        let xn = g.input(Tensor::new(vec![3, 6], x.to_vec()).unwrap());
        let gn = g.input(Tensor::new(vec![6], gain.to_vec()).unwrap());
        let bn = g.input(Tensor::new(vec![6], bias.to_vec()).unwrap());
        let y = g.layer_norm(xn, gn, bn).unwrap();
        let w = g.input(Tensor::new(vec![3, 6], weights.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        g.scalar_value(l)
    };

    let mut g = Graph::new();
    let xn = g.param(x0.clone());
    let gn = g.param(g0.clone());
    let bn = g.param(b0.clone());
    let y = g.layer_norm(xn, gn, bn).unwrap();
    let w = g.input(Tensor::new(vec![3, 6], weights.clone()).unwrap());
    let p = g.mul(y, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();

    for (name, id, data, eval) in [
        (
            "x",
            xn,
            &x0.data,
            Box::new(|v: &[f32]| loss_of(v, &g0.data, &b0.data)) as Box<dyn FnMut(&[f32]) -> f32>,
        ),
        ("gain", gn, &g0.data, Box::new(|v| loss_of(&x0.data, v, &b0.data))),
        ("bias", bn, &b0.data, Box::new(|v| loss_of(&x0.data, &g0.data, v))),
    ] {
        let fd = central_differences(eval, data, H);
        let cmp = compare_grads(g.grad(id).unwrap(), &fd, FLOOR);
        assert!(cmp.max_rel_err < RTOL, "{name}: {cmp:?}");
    }
}

#[test]
fn gelu_and_relu_gradients_match_finite_differences() {
    let mut rng = rng_for(102, stream::ORACLE, 0);
    let x0 = randn(vec![12], &mut rng);
    for act in ["gelu", "relu"] {
        let loss_of = |x: &[f32]| -> f32 {
            let mut g = Graph::new();
            let xn = g.input(Tensor::new(vec![12], x.to_vec()).unwrap());
            let y = if act == "gelu" { g.gelu(xn) } else { g.relu(xn) };
            let l = g.sum(y);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let xn = g.param(x0.clone());
        let y = if act == "gelu" { g.gelu(xn) } else { g.relu(xn) };
        let l = g.sum(y);
        g.backward(l).unwrap();
        let fd = central_differences(loss_of, &x0.data, H);
        let cmp = compare_grads(g.grad(xn).unwrap(), &fd, FLOOR);
        assert!(cmp.max_rel_err < RTOL, "{act}: {cmp:?}");
    }
}

#[test]
fn softmax_cross_entropy_gradients_match_finite_differences() {
    let mut rng = rng_for(103, stream::ORACLE, 0);
    let logits0 = randn(vec![4, 3], &mut rng);
    let targets = vec![0usize, 2, 1, 1];

    let loss_of = |x: &[f32]| -> f32 {
        let mut g = Graph::new();
        let l = g.input(Tensor::new(vec![4, 3], x.to_vec()).unwrap());
        let loss = g.cross_entropy_mean(l, targets.clone()).unwrap();
        g.scalar_value(loss)
    };
    let mut g = Graph::new();
    let l = g.param(logits0.clone());
    let loss = g.cross_entropy_mean(l, targets.clone()).unwrap();
    g.backward(loss).unwrap();
    let fd = central_differences(loss_of, &logits0.data, H);
    let cmp = compare_grads(g.grad(l).unwrap(), &fd, FLOOR);
    assert!(cmp.max_rel_err < RTOL, "{cmp:?}");
}

#[test]
fn softmax_axis_gradients_match_finite_differences() {
    let mut rng = rng_for(104, stream::ORACLE, 0);
    let x0 = randn(vec![2, 4], &mut rng);
    let mut wrng = rng_for(104, stream::ORACLE, 1);
    let weights: Vec<f32> = (0..8).map(|_| wrng.random_range(0.5..1.5)).collect();
    let loss_of = |x: &[f32]| -> f32 {
        let mut g = Graph::new();
        let xn = g.input(Tensor::new(vec![2, 4], x.to_vec()).unwrap());
        let y = g.softmax(xn, 1).unwrap();
        let w = g.input(Tensor::new(vec![2, 4], weights.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        g.scalar_value(l)
    };
    let mut g = Graph::new();
    let xn = g.param(x0.clone());
    let y = g.softmax(xn, 1).unwrap();
    let w = g.input(Tensor::new(vec![2, 4], weights.clone()).unwrap());
    let p = g.mul(y, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    let fd = central_differences(loss_of, &x0.data, H);
    let cmp = compare_grads(g.grad(xn).unwrap(), &fd, FLOOR);
    assert!(cmp.max_rel_err < RTOL, "{cmp:?}");
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = rng_for(105, stream::ORACLE, 0);
    // batch 2, seq 3, d 8, heads 2
    let q0 = randn(vec![6, 8], &mut rng);
    let k0 = randn(vec![6, 8], &mut rng);
    let v0 = randn(vec![6, 8], &mut rng);
    let mut wrng = rng_for(105, stream::ORACLE, 1);
    let weights: Vec<f32> = (0..48).map(|_| wrng.random_range(0.5..1.5)).collect();

    for causal in [true, false] {
        let loss_of = |q: &[f32], k: &[f32], v: &[f32]| -> f32 {
            let mut g = Graph::new();
            let qn = g.input(Tensor::new(vec![6, 8], q.to_vec()).unwrap());
            let kn = g.input(Tensor::new(vec![6, 8], k.to_vec()).unwrap());
            let vn = g.input(Tensor::new(vec![6, 8], v.to_vec()).unwrap());
            let y = g.attention(qn, kn, vn, 2, 3, causal).unwrap();
            let w = g.input(Tensor::new(vec![6, 8], weights.clone()).unwrap());
            let p = g.mul(y, w).unwrap();
            let l = g.sum(p);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let qn = g.param(q0.clone());
        let kn = g.param(k0.clone());
        let vn = g.param(v0.clone());
        let y = g.attention(qn, kn, vn, 2, 3, causal).unwrap();
        let w = g.input(Tensor::new(vec![6, 8], weights.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();

        let fd_q = central_differences(|x| loss_of(x, &k0.data, &v0.data), &q0.data, H);
        let cmp = compare_grads(g.grad(qn).unwrap(), &fd_q, FLOOR);
        assert!(cmp.max_rel_err < RTOL, "dQ causal={causal}: {cmp:?}");
        let fd_k = central_differences(|x| loss_of(&q0.data, x, &v0.data), &k0.data, H);
        let cmp = compare_grads(g.grad(kn).unwrap(), &fd_k, FLOOR);
        assert!(cmp.max_rel_err < RTOL, "dK causal={causal}: {cmp:?}");
        let fd_v = central_differences(|x| loss_of(&q0.data, &k0.data, x), &v0.data, H);
        let cmp = compare_grads(g.grad(vn).unwrap(), &fd_v, FLOOR);
        assert!(cmp.max_rel_err < RTOL, "dV causal={causal}: {cmp:?}");
    }
}

fn gradcheck_model() -> (ModelConfig, Vec<TokenSequence>) {
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
    (config, seqs)
}

/// Whole-model check: every parameter tensor's gradient against central
/// finite differences on a 2-layer, d_model=16 configuration.
#[test]
fn full_model_gradients_match_finite_differences() {
    let (config, seqs) = gradcheck_model();
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

    let flat0 = params.to_flat();
    let mut scratch = params.clone();
    let loss_of = |flat: &[f32]| -> f32 {
        scratch.set_from_flat(flat);
        let mut g = Graph::new();
        let b = model::build_forward(&mut g, &scratch, &seq_refs, false, None).unwrap();
        let l = g.cross_entropy_mean(b.logits, targets.clone()).unwrap();
        g.scalar_value(l)
    };
    let numeric = central_differences(loss_of, &flat0, H_MODEL);

    // Report per-tensor worst errors so failures name the offender.
    let mut off = 0;
    let mut global_worst = 0.0f32;
    for (name, tensor) in params.named() {
        let n = tensor.numel();
        let cmp = compare_grads(&analytic[off..off + n], &numeric[off..off + n], FLOOR_MODEL);
        assert!(
            cmp.max_rel_err < RTOL,
            "{name}: rel err {} at {} (analytic {}, numeric {})",
            cmp.max_rel_err,
            cmp.worst_index,
            cmp.analytic_at_worst,
            cmp.numeric_at_worst
        );
        global_worst = global_worst.max(cmp.max_rel_err);
        off += n;
    }
    println!("full-model gradcheck: max guarded rel err {global_worst:.3e} over {off} params");
}
