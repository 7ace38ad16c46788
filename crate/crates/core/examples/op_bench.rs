// quick probe — per-op costs at desk shapes
use rulex_core::tensor::{Graph, Tensor};
use rulex_core::rng::{rng_for, stream};
use std::time::Instant;

fn main() {
    let mut rng = rng_for(7, stream::ORACLE, 0);
    let x = Tensor::randn(vec![800, 64], 1.0, &mut rng);
    let big = Tensor::randn(vec![800, 256], 1.0, &mut rng);
    let gain = Tensor::new(vec![64], vec![1.0; 64]).unwrap();
    let bias = Tensor::zeros(vec![64]);
    let n = 300;

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let q = g.input(x.clone());
        let k = g.input(x.clone());
        let v = g.input(x.clone());
        std::hint::black_box(g.attention(q, k, v, 8, 25, true).unwrap());
    }
    println!("attention fwd (b32 s25 d64 h8): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let a = g.input(big.clone());
        std::hint::black_box(g.gelu(a));
    }
    println!("gelu 800x256:                   {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let gn = g.input(gain.clone());
        let bn = g.input(bias.clone());
        std::hint::black_box(g.layer_norm(a, gn, bn).unwrap());
    }
    println!("layer_norm 800x64:              {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let b = g.input(x.clone());
        std::hint::black_box(g.add(a, b).unwrap());
    }
    println!("add 800x64 (incl 2 clones):     {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        std::hint::black_box(x.clone());
    }
    println!("clone 800x64:                   {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
