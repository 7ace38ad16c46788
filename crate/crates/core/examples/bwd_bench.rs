// quick probe — per-op backward costs at desk shapes
use rulex_core::rng::{rng_for, stream};
use rulex_core::tensor::{Graph, Tensor};
use std::time::Instant;

fn time_op(name: &str, n: usize, mut build: impl FnMut() -> (Graph, rulex_core::tensor::NodeId)) {
    // forward-only cost
    let t0 = Instant::now();
    for _ in 0..n {
        std::hint::black_box(build());
    }
    let fwd = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    // forward + backward
    let t0 = Instant::now();
    for _ in 0..n {
        let (mut g, out) = build();
        let l = g.sum(out);
        g.backward(l).unwrap();
        std::hint::black_box(g.len());
    }
    let both = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    println!("{name}: fwd {fwd:.3} ms, bwd {:.3} ms", both - fwd);
}

fn main() {
    let mut rng = rng_for(7, stream::ORACLE, 0);
    let x64 = Tensor::randn(vec![800, 64], 1.0, &mut rng);
    let x256 = Tensor::randn(vec![800, 256], 1.0, &mut rng);
    let w64 = Tensor::randn(vec![64, 64], 0.1, &mut rng);
    let w64_256 = Tensor::randn(vec![64, 256], 0.1, &mut rng);
    let w256_64 = Tensor::randn(vec![256, 64], 0.1, &mut rng);
    let gain = Tensor::new(vec![64], vec![1.0; 64]).unwrap();
    let bias = Tensor::zeros(vec![64]);
    let n = 100;

    time_op("attention b32s25d64h8", n, || {
        let mut g = Graph::new();
        let q = g.param(x64.clone());
        let k = g.param(x64.clone());
        let v = g.param(x64.clone());
        let a = g.attention(q, k, v, 8, 25, true).unwrap();
        (g, a)
    });
    time_op("matmul 800x64 . 64x64", n, || {
        let mut g = Graph::new();
        let a = g.param(x64.clone());
        let b = g.param(w64.clone());
        let c = g.matmul(a, b).unwrap();
        (g, c)
    });
    time_op("matmul 800x64 . 64x256", n, || {
        let mut g = Graph::new();
        let a = g.param(x64.clone());
        let b = g.param(w64_256.clone());
        let c = g.matmul(a, b).unwrap();
        (g, c)
    });
    time_op("matmul 800x256 . 256x64", n, || {
        let mut g = Graph::new();
        let a = g.param(x256.clone());
        let b = g.param(w256_64.clone());
        let c = g.matmul(a, b).unwrap();
        (g, c)
    });
    time_op("gelu 800x256", n, || {
        let mut g = Graph::new();
        let a = g.param(x256.clone());
        let y = g.gelu(a);
        (g, y)
    });
    time_op("layer_norm 800x64", n, || {
        let mut g = Graph::new();
        let a = g.param(x64.clone());
        let gn = g.param(gain.clone());
        let bn = g.param(bias.clone());
        let y = g.layer_norm(a, gn, bn).unwrap();
        (g, y)
    });
    time_op("add_bias 800x64", n, || {
        let mut g = Graph::new();
        let a = g.param(x64.clone());
        let bn = g.param(bias.clone());
        let y = g.add_bias(a, bn).unwrap();
        (g, y)
    });
    time_op("add 800x64", n, || {
        let mut g = Graph::new();
        let a = g.param(x64.clone());
        let b = g.param(x64.clone());
        let y = g.add(a, b).unwrap();
        (g, y)
    });
}
