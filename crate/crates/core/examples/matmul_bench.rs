// quick probe — raw kernel throughput
use rulex_core::tensor::{Graph, Tensor};
use rulex_core::rng::{rng_for, stream};
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let mut rng = rng_for(7, stream::ORACLE, 0);
    let a = Tensor::randn(vec![m, k], 1.0, &mut rng);
    let b = Tensor::randn(vec![k, n], 1.0, &mut rng);
    // warmup
    for _ in 0..5 {
        let mut g = Graph::new();
        let a = g.input(a.clone());
        let b = g.input(b.clone());
        std::hint::black_box(g.matmul(a, b).unwrap());
    }
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::new();
        let a = g.input(a.clone());
        let b = g.input(b.clone());
        std::hint::black_box(g.matmul(a, b).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    let flops = 2.0 * (m * k * n) as f64;
    println!("{m}x{k}x{n}: {:.3} ms, {:.2} GFLOP/s", dt * 1000.0, flops / dt / 1e9);
}

fn main() {
    bench(800, 64, 64, 300);
    bench(800, 64, 256, 300);
    bench(800, 256, 64, 300);
    bench(64, 64, 64, 1000);
}
