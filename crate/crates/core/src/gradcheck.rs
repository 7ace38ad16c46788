//! Central-difference gradient checking.
//!
//! The checker differentiates a black-box loss numerically and compares it
//! against reverse-mode gradients. It only touches public forward APIs, so
//! it stays independent of the tape's backward implementation.

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_differences<F>(mut f: F, x: &[f32], h: f32) -> Vec<f32>
where
    F: FnMut(&[f32]) -> f32,
{
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let fp = f(&xs) as f64;
            xs[i] = orig - h;
            let fm = f(&xs) as f64;
            xs[i] = orig;
            ((fp - fm) / (2.0 * h as f64)) as f32
        })
        .collect()
}

/// Worst-coordinate comparison between two gradients.
#[derive(Debug, Clone)]
pub struct GradCompare {
    /// max over coordinates of |a-b| / max(|a|, |b|, floor)
    pub max_rel_err: f32,
    pub worst_index: usize,
    pub analytic_at_worst: f32,
    pub numeric_at_worst: f32,
}

/// Relative error with an absolute floor on the denominator. The floor
/// absorbs the f32 finite-difference noise on near-zero coordinates, where
/// the numeric estimate itself stops being meaningful.
pub fn compare_grads(analytic: &[f32], numeric: &[f32], floor: f32) -> GradCompare {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = GradCompare {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst.max_rel_err {
            worst = GradCompare {
                max_rel_err: err,
                worst_index: i,
                analytic_at_worst: a,
                numeric_at_worst: n,
            };
        }
    }
    worst
}
