//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed operation together with the buffers
//! the backward pass needs, then replays the tape in exact reverse order to
//! populate gradients. Operations only ever reference earlier nodes, so the
//! reverse sweep visits each node after all of its consumers.
//!
//! The op set is deliberately small: exactly what a pre-norm transformer
//! trained with cross-entropy needs, plus a few reductions for tests.

use thiserror::Error;

use crate::parallel::{for_each_chunk_mut, for_each_chunk_mut_when, PAR_MIN_WORK};

/// Epsilon added to the per-vector variance in layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
}

/// Dense row-major f32 tensor, optionally carrying a gradient buffer of the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Normal(0, std^2) entries drawn in row-major order.
    pub fn randn<R: rand::Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f32,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    AddPositions {
        a: NodeId,
        pos: NodeId,
        seq_len: usize,
    },
    Gelu {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Dropout {
        a: NodeId,
        mask: Vec<f32>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Per row: interleaved (mean, reciprocal std).
        stats: Vec<f32>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        causal: bool,
        /// Attention probabilities, `[batch][head][s][s]` row-major.
        probs: Vec<f32>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Sum {
        a: NodeId,
    },
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed operations with everything the backward
/// passes need. Confined to one thread during forward/backward; the ops
/// themselves fan out internally when the `parallel` feature is on.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node.
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Inserts a leaf that participates in gradient computation.
    pub fn param(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = true;
        self.push(tensor, Op::Leaf)
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    /// Zeroes every allocated gradient buffer, keeping allocations.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.tensor.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, requires_grad: bool) -> NodeId {
        let tensor = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(tensor, op)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    // ── Operations ─────────────────────────────────────────────────────

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_into(&mut out, self.data(a), self.data(b), k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_result(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = self.data(a).to_vec();
        let bd = self.data(b);
        let chunk_len = chunk_for_elementwise(out.len());
        for_each_chunk_mut(&mut out, chunk_len, |i, chunk| {
            for (o, &x) in chunk.iter_mut().zip(&bd[i * chunk_len..]) {
                *o += x;
            }
        });
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, out, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let out: Vec<f32> = self.data(a).iter().map(|x| x * factor).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push_result(shape, out, Op::Scale { a, factor }, rg)
    }

    /// Adds a `[n]` bias to every row of a `[rows, n]` tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let n = sa[1];
        let mut out = self.data(a).to_vec();
        let bd = self.data(bias).to_vec();
        for_each_chunk_mut(&mut out, n, |_, row| {
            for (o, &x) in row.iter_mut().zip(&bd) {
                *o += x;
            }
        });
        let rg = self.requires(a) || self.requires(bias);
        let shape = sa.to_vec();
        Ok(self.push_result(shape, out, Op::AddBias { a, bias }, rg))
    }

    /// Adds learned positional rows: input `[batch*seq_len, d]`, positions
    /// `[max_seq, d]`; row `b*seq_len + t` receives position row `t`.
    pub fn add_positions(
        &mut self,
        a: NodeId,
        pos: NodeId,
        seq_len: usize,
    ) -> Result<NodeId, TensorError> {
        let (sa, sp) = (self.shape(a), self.shape(pos));
        if sa.len() != 2 || sp.len() != 2 || sp[1] != sa[1] || sa[0] % seq_len != 0 || sp[0] < seq_len
        {
            return Err(TensorError::ShapeMismatch {
                op: "add_positions",
                detail: format!("{sa:?} + {sp:?} (seq_len {seq_len})"),
            });
        }
        let d = sa[1];
        let mut out = self.data(a).to_vec();
        let pd = self.data(pos).to_vec();
        for_each_chunk_mut(&mut out, d, |row, chunk| {
            let t = row % seq_len;
            for (o, &x) in chunk.iter_mut().zip(&pd[t * d..(t + 1) * d]) {
                *o += x;
            }
        });
        let rg = self.requires(a) || self.requires(pos);
        let shape = sa.to_vec();
        Ok(self.push_result(shape, out, Op::AddPositions { a, pos, seq_len }, rg))
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.data(a).to_vec();
        let chunk_len = chunk_for_elementwise(out.len());
        for_each_chunk_mut(&mut out, chunk_len, |_, chunk| {
            for x in chunk.iter_mut() {
                *x = gelu_scalar(*x);
            }
        });
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push_result(shape, out, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f32> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push_result(shape, out, Op::Relu { a }, rg)
    }

    /// Inverted dropout with keep-probability `1 - rate`; the mask is drawn
    /// here and reused verbatim in the backward pass.
    pub fn dropout<R: rand::Rng>(&mut self, a: NodeId, rate: f32, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            // No-op fast path; still recorded so graphs stay comparable.
            let out = self.data(a).to_vec();
            let rg = self.requires(a);
            let shape = self.shape(a).to_vec();
            let mask = Vec::new();
            return self.push_result(shape, out, Op::Dropout { a, mask }, rg);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..self.data(a).len())
            .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let out: Vec<f32> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.requires(a);
        let shape = self.shape(a).to_vec();
        self.push_result(shape, out, Op::Dropout { a, mask }, rg)
    }

    /// Per-vector normalization over the trailing axis, then affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            detail: "empty shape".into(),
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} vs trailing dim {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let rows = self.data(x).len() / d;
        let mut out = self.data(x).to_vec();
        let gd = self.data(gain).to_vec();
        let bd = self.data(bias).to_vec();
        let mut stats = vec![0.0f32; rows * 2];
        // Two-phase: row stats first (so the parallel row map stays pure),
        // then the normalized write.
        let xd = self.data(x).to_vec();
        let stat_pairs: Vec<(f32, f32)> = crate::parallel::map_indexed(rows, |r| {
            let row = &xd[r * d..(r + 1) * d];
            let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as f32;
            let var = (row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean as f64;
                    c * c
                })
                .sum::<f64>()
                / d as f64) as f32;
            (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
        });
        for (r, (m, rstd)) in stat_pairs.iter().enumerate() {
            stats[2 * r] = *m;
            stats[2 * r + 1] = *rstd;
        }
        for_each_chunk_mut(&mut out, d, |r, row| {
            let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
            for (j, o) in row.iter_mut().enumerate() {
                *o = (*o - mean) * rstd * gd[j] + bd[j];
            }
        });
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        let shape = sx.to_vec();
        Ok(self.push_result(shape, out, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let mut out = self.data(x).to_vec();
        softmax_lanes(&mut out, &shape, axis);
        let rg = self.requires(x);
        Ok(self.push_result(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Multi-head self-attention over `batch` sequences packed as
    /// `[batch*seq_len, d]`. Scores are scaled by `1/sqrt(d/heads)` and,
    /// when `causal`, position `s` only attends to positions `<= s`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        causal: bool,
    ) -> Result<NodeId, TensorError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sq != sv || sq.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("q {sq:?} k {sk:?} v {sv:?}"),
            });
        }
        let (rows, d) = (sq[0], sq[1]);
        if rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("rows {rows}, seq_len {seq_len}, d {d}, heads {heads}"),
            });
        }
        let batch = rows / seq_len;
        let mut out = vec![0.0f32; rows * d];
        let mut probs = vec![0.0f32; batch * heads * seq_len * seq_len];
        attention_forward(
            &mut out,
            &mut probs,
            self.data(q),
            self.data(k),
            self.data(v),
            batch,
            heads,
            seq_len,
            d,
            causal,
        );
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push_result(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities of the most recent attention node, laid out
    /// `[batch][head][query][key]`. Test and inspection hook.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f32]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Gathers rows of a `[rows, d]` tensor.
    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                detail: format!("{sx:?}"),
            });
        }
        let (r, d) = (sx[0], sx[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                detail: format!("row {bad} out of {r}"),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in &rows {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![rows.len(), d], out, Op::SelectRows { x, rows }, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f32 = self.data(a).iter().sum();
        let rg = self.requires(a);
        self.push_result(vec![1], vec![s], Op::Sum { a }, rg)
    }

    /// `-log softmax(logits)[target]` for 1-D logits.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("expected 1-D logits, got {shape:?}"),
            });
        }
        self.cross_entropy_rows(logits, vec![target], 1, shape[0])
    }

    /// Mean cross-entropy over the rows of `[rows, classes]` logits.
    pub fn cross_entropy_mean(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                detail: format!("logits {shape:?} vs {} targets", targets.len()),
            });
        }
        self.cross_entropy_rows(logits, targets, shape[0], shape[1])
    }

    fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        rows: usize,
        classes: usize,
    ) -> Result<NodeId, TensorError> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange {
                target: bad,
                classes,
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0f32; rows * classes];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (j, &l) in row.iter().enumerate() {
                let e = ((l - max) as f64).exp();
                probs[r * classes + j] = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p = (*p as f64 * inv) as f32;
            }
            let lse = max as f64 + sum.ln();
            total += lse - row[targets[r]] as f64;
        }
        let loss = (total / rows as f64) as f32;
        let rg = self.requires(logits);
        Ok(self.push_result(
            vec![1],
            vec![loss],
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` buffers of every node reachable from `loss` that requires
    /// them; call [`Graph::zero_grads`] first when reusing a tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::NotScalar(
                self.nodes[loss.0].tensor.shape.clone(),
            ));
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad || self.nodes[i].tensor.grad.is_none() {
                continue;
            }
            let gout = self.nodes[i].tensor.grad.take().expect("grad present");
            let contributions = self.op_backward(i, &gout);
            self.nodes[i].tensor.grad = Some(gout);
            for (id, g) in contributions {
                self.accumulate(id, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, values: Vec<f32>) {
        let tensor = &mut self.nodes[id.0].tensor;
        debug_assert_eq!(values.len(), tensor.numel());
        match tensor.grad.as_mut() {
            None => tensor.grad = Some(values),
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&values) {
                    *a += b;
                }
            }
        }
    }

    /// Computes the gradient contribution to each differentiable input of
    /// node `i`, given the upstream gradient `gout`.
    fn op_backward(&self, i: usize, gout: &[f32]) -> Vec<(NodeId, Vec<f32>)> {
        let node = &self.nodes[i];
        let mut contrib = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    // dA = dC . B^T
                    let mut da = vec![0.0f32; m * k];
                    matmul_nt_into(&mut da, gout, self.data(*b), n, k);
                    contrib.push((*a, da));
                }
                if self.requires(*b) {
                    // dB = A^T . dC
                    let mut db = vec![0.0f32; k * n];
                    matmul_tn_into(&mut db, self.data(*a), gout, m, k, n);
                    contrib.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    contrib.push((*a, gout.to_vec()));
                }
                if self.requires(*b) {
                    contrib.push((*b, gout.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let g = gout.iter().zip(self.data(*b)).map(|(g, x)| g * x).collect();
                    contrib.push((*a, g));
                }
                if self.requires(*b) {
                    let g = gout.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    contrib.push((*b, g));
                }
            }
            Op::Scale { a, factor } => {
                if self.requires(*a) {
                    contrib.push((*a, gout.iter().map(|g| g * factor).collect()));
                }
            }
            Op::AddBias { a, bias } => {
                let n = self.shape(*bias)[0];
                if self.requires(*a) {
                    contrib.push((*a, gout.to_vec()));
                }
                if self.requires(*bias) {
                    let mut gb = vec![0.0f32; n];
                    for row in gout.chunks(n) {
                        for (o, &g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    contrib.push((*bias, gb));
                }
            }
            Op::AddPositions { a, pos, seq_len } => {
                let d = self.shape(*a)[1];
                if self.requires(*a) {
                    contrib.push((*a, gout.to_vec()));
                }
                if self.requires(*pos) {
                    let mut gp = vec![0.0f32; self.data(*pos).len()];
                    for (row, chunk) in gout.chunks(d).enumerate() {
                        let t = row % seq_len;
                        for (o, &g) in gp[t * d..(t + 1) * d].iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    contrib.push((*pos, gp));
                }
            }
            Op::Gelu { a } => {
                if self.requires(*a) {
                    let xd = self.data(*a);
                    let mut g = vec![0.0f32; xd.len()];
                    let chunk_len = chunk_for_elementwise(g.len());
                    for_each_chunk_mut(&mut g, chunk_len, |i, chunk| {
                        let base = i * chunk_len;
                        for (j, o) in chunk.iter_mut().enumerate() {
                            *o = gout[base + j] * gelu_grad_scalar(xd[base + j]);
                        }
                    });
                    contrib.push((*a, g));
                }
            }
            Op::Relu { a } => {
                if self.requires(*a) {
                    let g = self
                        .data(*a)
                        .iter()
                        .zip(gout)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    contrib.push((*a, g));
                }
            }
            Op::Dropout { a, mask } => {
                if self.requires(*a) {
                    let g = if mask.is_empty() {
                        gout.to_vec()
                    } else {
                        gout.iter().zip(mask).map(|(g, m)| g * m).collect()
                    };
                    contrib.push((*a, g));
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = self.shape(*gain)[0];
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let rows = xd.len() / d;
                if self.requires(*x) {
                    let mut gx = vec![0.0f32; xd.len()];
                    for_each_chunk_mut(&mut gx, d, |r, out| {
                        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..d {
                            let xh = (xr[j] - mean) * rstd;
                            let dg = gr[j] * gd[j];
                            s1 += dg as f64;
                            s2 += (dg * xh) as f64;
                        }
                        let (s1, s2) = ((s1 / d as f64) as f32, (s2 / d as f64) as f32);
                        for j in 0..d {
                            let xh = (xr[j] - mean) * rstd;
                            out[j] = rstd * (gr[j] * gd[j] - s1 - xh * s2);
                        }
                    });
                    contrib.push((*x, gx));
                }
                if self.requires(*gain) {
                    let mut gg = vec![0.0f32; d];
                    for r in 0..rows {
                        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        for j in 0..d {
                            gg[j] += gr[j] * (xr[j] - mean) * rstd;
                        }
                    }
                    contrib.push((*gain, gg));
                }
                if self.requires(*bias) {
                    let mut gb = vec![0.0f32; d];
                    for row in gout.chunks(d) {
                        for (o, &g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    contrib.push((*bias, gb));
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires(*x) {
                    let y = &node.tensor.data;
                    let shape = &node.tensor.shape;
                    let mut gx = vec![0.0f32; y.len()];
                    softmax_backward(&mut gx, y, gout, shape, *axis);
                    contrib.push((*x, gx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                causal,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let batch = self.shape(*q)[0] / seq_len;
                let (gq, gk, gv) = attention_backward(
                    gout,
                    probs,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    batch,
                    *heads,
                    *seq_len,
                    d,
                    *causal,
                );
                if self.requires(*q) {
                    contrib.push((*q, gq));
                }
                if self.requires(*k) {
                    contrib.push((*k, gk));
                }
                if self.requires(*v) {
                    contrib.push((*v, gv));
                }
            }
            Op::SelectRows { x, rows } => {
                if self.requires(*x) {
                    let d = self.shape(*x)[1];
                    let mut gx = vec![0.0f32; self.data(*x).len()];
                    for (out_row, &src) in rows.iter().enumerate() {
                        let g = &gout[out_row * d..(out_row + 1) * d];
                        for (o, &gv) in gx[src * d..(src + 1) * d].iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                    contrib.push((*x, gx));
                }
            }
            Op::Sum { a } => {
                if self.requires(*a) {
                    contrib.push((*a, vec![gout[0]; self.data(*a).len()]));
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                if self.requires(*logits) {
                    let classes = probs.len() / targets.len();
                    let rows = targets.len();
                    let scale = gout[0] / rows as f32;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * classes + t] -= 1.0;
                    }
                    for g in &mut gl {
                        *g *= scale;
                    }
                    contrib.push((*logits, gl));
                }
            }
        }
        contrib
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// Chunk length for elementwise maps; trailing partial chunks are fine.
fn chunk_for_elementwise(n: usize) -> usize {
    n.clamp(1, 8192)
}

/// Register-tile width for the gemm kernels. Accumulators of this width
/// live in vector registers across the whole k loop, so the output row is
/// written exactly once.
const GEMM_TILE: usize = 32;

/// `out = a[m,k] . b[k,n]`, row-parallel, register-tiled over columns.
pub(crate) fn matmul_into(out: &mut [f32], a: &[f32], b: &[f32], k: usize, n: usize) {
    let work = out.len() * k;
    for_each_chunk_mut_when(out, n, work >= PAR_MIN_WORK, |row, out_row| {
        let ar = &a[row * k..(row + 1) * k];
        let mut col = 0;
        while col + GEMM_TILE <= n {
            let mut acc = [0.0f32; GEMM_TILE];
            for (kk, &aik) in ar.iter().enumerate() {
                if aik != 0.0 {
                    let br = &b[kk * n + col..kk * n + col + GEMM_TILE];
                    for (o, &bv) in acc.iter_mut().zip(br) {
                        *o += aik * bv;
                    }
                }
            }
            out_row[col..col + GEMM_TILE].copy_from_slice(&acc);
            col += GEMM_TILE;
        }
        if col < n {
            let rest = &mut out_row[col..];
            rest.fill(0.0);
            for (kk, &aik) in ar.iter().enumerate() {
                if aik != 0.0 {
                    let br = &b[kk * n + col..(kk + 1) * n];
                    for (o, &bv) in rest.iter_mut().zip(br) {
                        *o += aik * bv;
                    }
                }
            }
        }
    });
}

/// `out[m,k] = g[m,n] . b[k,n]^T`: each output element is a dot product of
/// two contiguous rows; four dots share each `g` load.
pub(crate) fn matmul_nt_into(out: &mut [f32], g: &[f32], b: &[f32], n: usize, k: usize) {
    let work = out.len() * n;
    for_each_chunk_mut_when(out, k, work >= PAR_MIN_WORK, |row, out_row| {
        let gr = &g[row * n..(row + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            let mut acc = [0.0f32; 4];
            for j in 0..n {
                let gv = gr[j];
                acc[0] += gv * b0[j];
                acc[1] += gv * b1[j];
                acc[2] += gv * b2[j];
                acc[3] += gv * b3[j];
            }
            out_row[kk..kk + 4].copy_from_slice(&acc);
            kk += 4;
        }
        while kk < k {
            let br = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0f32;
            for (x, y) in gr.iter().zip(br) {
                s += x * y;
            }
            out_row[kk] = s;
            kk += 1;
        }
    });
}

/// Microkernel shape for [`matmul_tn_into`]: 4 output rows share every
/// gradient-row load, 16 columns per register tile.
const TN_KK: usize = 4;
const TN_COL: usize = 16;

/// `out[k,n] = a[m,k]^T . g[m,n]`: parallel over groups of 4 output rows;
/// each tile keeps a 4x16 accumulator block in registers while both inputs
/// stream through exactly once per tile column.
pub(crate) fn matmul_tn_into(out: &mut [f32], a: &[f32], g: &[f32], m: usize, k: usize, n: usize) {
    let work = m * k * n;
    for_each_chunk_mut_when(out, TN_KK * n, work >= PAR_MIN_WORK, |grp, out_chunk| {
        let kk0 = grp * TN_KK;
        let kq = out_chunk.len() / n;
        if kq == TN_KK {
            let mut col = 0;
            while col + TN_COL <= n {
                let mut acc = [[0.0f32; TN_COL]; TN_KK];
                for row in 0..m {
                    let ar = &a[row * k + kk0..row * k + kk0 + TN_KK];
                    let gr = &g[row * n + col..row * n + col + TN_COL];
                    for i in 0..TN_KK {
                        let aik = ar[i];
                        for j in 0..TN_COL {
                            acc[i][j] += aik * gr[j];
                        }
                    }
                }
                for (i, acc_row) in acc.iter().enumerate() {
                    out_chunk[i * n + col..i * n + col + TN_COL].copy_from_slice(acc_row);
                }
                col += TN_COL;
            }
            if col < n {
                let w = n - col;
                let mut acc = [[0.0f32; TN_COL]; TN_KK];
                for row in 0..m {
                    let ar = &a[row * k + kk0..row * k + kk0 + TN_KK];
                    let gr = &g[row * n + col..(row + 1) * n];
                    for i in 0..TN_KK {
                        let aik = ar[i];
                        for (j, &gv) in gr.iter().enumerate() {
                            acc[i][j] += aik * gv;
                        }
                    }
                }
                for (i, acc_row) in acc.iter().enumerate() {
                    out_chunk[i * n + col..i * n + col + w].copy_from_slice(&acc_row[..w]);
                }
            }
        } else {
            // Trailing k % 4 output rows.
            for i in 0..kq {
                let kk = kk0 + i;
                let mut col = 0;
                while col < n {
                    let w = (n - col).min(TN_COL);
                    let mut acc = [0.0f32; TN_COL];
                    for row in 0..m {
                        let aik = a[row * k + kk];
                        if aik != 0.0 {
                            let gr = &g[row * n + col..row * n + col + w];
                            for (o, &gv) in acc.iter_mut().zip(gr) {
                                *o += aik * gv;
                            }
                        }
                    }
                    out_chunk[i * n + col..i * n + col + w].copy_from_slice(&acc[..w]);
                    col += w;
                }
            }
        }
    });
}

/// Rational minimax tanh (float accuracy ~1e-7), branch-free so the
/// elementwise loops autovectorize; libm's `tanhf` is a scalar call and
/// dominates the feed-forward cost otherwise.
#[inline(always)]
fn fast_tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311_5;
    const A1: f32 = 4.893_525_6e-3;
    const A3: f32 = 6.372_619_3e-4;
    const A5: f32 = 1.485_722_4e-5;
    const A7: f32 = 5.122_297_1e-8;
    const A9: f32 = -8.604_672e-11;
    const A11: f32 = 2.000_188e-13;
    const A13: f32 = -2.760_768_5e-16;
    const B0: f32 = 4.893_525_2e-3;
    const B2: f32 = 2.268_434_6e-3;
    const B4: f32 = 1.185_347e-4;
    const B6: f32 = 1.198_258_4e-6;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let p = A13.mul_add(x2, A11);
    let p = p.mul_add(x2, A9);
    let p = p.mul_add(x2, A7);
    let p = p.mul_add(x2, A5);
    let p = p.mul_add(x2, A3);
    let p = p.mul_add(x2, A1);
    let p = p * x;
    let q = B6.mul_add(x2, B4);
    let q = q.mul_add(x2, B2);
    let q = q.mul_add(x2, B0);
    p / q
}

fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_56; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

fn gelu_grad_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_56;
    let u = C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place softmax over every lane along `axis`.
fn softmax_lanes(data: &mut [f32], shape: &[usize], axis: usize) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = 0.0f32;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                data[base + a * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for a in 0..axis_len {
                data[base + a * inner] *= inv;
            }
        }
    }
}

fn softmax_backward(gx: &mut [f32], y: &[f32], gy: &[f32], shape: &[usize], axis: usize) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0f32;
            for a in 0..axis_len {
                dot += y[base + a * inner] * gy[base + a * inner];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                gx[idx] = y[idx] * (gy[idx] - dot);
            }
        }
    }
}

/// One sequence-block of the attention forward pass.
#[allow(clippy::too_many_arguments)]
fn attention_block_forward(
    out_b: &mut [f32],
    probs_b: &mut [f32],
    q_b: &[f32],
    k_b: &[f32],
    v_b: &[f32],
    heads: usize,
    s: usize,
    d: usize,
    causal: bool,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    for h in 0..heads {
        let off = h * dh;
        for si in 0..s {
            let limit = if causal { si + 1 } else { s };
            let qrow = &q_b[si * d + off..si * d + off + dh];
            let prow = &mut probs_b[h * s * s + si * s..h * s * s + si * s + s];
            let mut max = f32::NEG_INFINITY;
            for t in 0..limit {
                let krow = &k_b[t * d + off..t * d + off + dh];
                let mut dot = 0.0f32;
                for (a, b) in qrow.iter().zip(krow) {
                    dot += a * b;
                }
                prow[t] = dot * scale;
                max = max.max(prow[t]);
            }
            let mut sum = 0.0f32;
            for p in prow.iter_mut().take(limit) {
                *p = (*p - max).exp();
                sum += *p;
            }
            let inv = 1.0 / sum;
            for p in prow.iter_mut().take(limit) {
                *p *= inv;
            }
            let orow = &mut out_b[si * d + off..si * d + off + dh];
            for t in 0..limit {
                let p = prow[t];
                if p != 0.0 {
                    let vrow = &v_b[t * d + off..t * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    out: &mut [f32],
    probs: &mut [f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    batch: usize,
    heads: usize,
    s: usize,
    d: usize,
    causal: bool,
) {
    let sd = s * d;
    let hss = heads * s * s;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if batch > 1 && sd * batch >= 16_384 {
            out.par_chunks_mut(sd)
                .zip(probs.par_chunks_mut(hss))
                .enumerate()
                .for_each(|(b, (out_b, probs_b))| {
                    attention_block_forward(
                        out_b,
                        probs_b,
                        &q[b * sd..(b + 1) * sd],
                        &k[b * sd..(b + 1) * sd],
                        &v[b * sd..(b + 1) * sd],
                        heads,
                        s,
                        d,
                        causal,
                    );
                });
            return;
        }
    }
    for b in 0..batch {
        attention_block_forward(
            &mut out[b * sd..(b + 1) * sd],
            &mut probs[b * hss..(b + 1) * hss],
            &q[b * sd..(b + 1) * sd],
            &k[b * sd..(b + 1) * sd],
            &v[b * sd..(b + 1) * sd],
            heads,
            s,
            d,
            causal,
        );
    }
}

/// One sequence-block of the attention backward pass.
#[allow(clippy::too_many_arguments)]
fn attention_block_backward(
    gq_b: &mut [f32],
    gk_b: &mut [f32],
    gv_b: &mut [f32],
    gout_b: &[f32],
    probs_b: &[f32],
    q_b: &[f32],
    k_b: &[f32],
    heads: usize,
    s: usize,
    d: usize,
    v_b: &[f32],
    causal: bool,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dscores = vec![0.0f32; s];
    for h in 0..heads {
        let off = h * dh;
        for si in 0..s {
            let limit = if causal { si + 1 } else { s };
            let prow = &probs_b[h * s * s + si * s..h * s * s + si * s + s];
            let grow = &gout_b[si * d + off..si * d + off + dh];
            // dprobs then dscores via the softmax Jacobian.
            let mut pdot = 0.0f32;
            for t in 0..limit {
                let vrow = &v_b[t * d + off..t * d + off + dh];
                let mut dp = 0.0f32;
                for (g, vv) in grow.iter().zip(vrow) {
                    dp += g * vv;
                }
                dscores[t] = dp;
                pdot += prow[t] * dp;
            }
            for t in 0..limit {
                dscores[t] = prow[t] * (dscores[t] - pdot);
            }
            let qrow = &q_b[si * d + off..si * d + off + dh];
            let gqrow = &mut gq_b[si * d + off..si * d + off + dh];
            for t in 0..limit {
                let ds = dscores[t] * scale;
                let p = prow[t];
                let krow = &k_b[t * d + off..t * d + off + dh];
                if ds != 0.0 {
                    for (o, &kv) in gqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                    let gkrow = &mut gk_b[t * d + off..t * d + off + dh];
                    for (o, &qv) in gkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                }
                if p != 0.0 {
                    let gvrow = &mut gv_b[t * d + off..t * d + off + dh];
                    for (o, &g) in gvrow.iter_mut().zip(grow) {
                        *o += p * g;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    gout: &[f32],
    probs: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    batch: usize,
    heads: usize,
    s: usize,
    d: usize,
    causal: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let sd = s * d;
    let hss = heads * s * s;
    let mut gq = vec![0.0f32; batch * sd];
    let mut gk = vec![0.0f32; batch * sd];
    let mut gv = vec![0.0f32; batch * sd];
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if batch > 1 && sd * batch >= 16_384 {
            gq.par_chunks_mut(sd)
                .zip(gk.par_chunks_mut(sd))
                .zip(gv.par_chunks_mut(sd))
                .enumerate()
                .for_each(|(b, ((gq_b, gk_b), gv_b))| {
                    attention_block_backward(
                        gq_b,
                        gk_b,
                        gv_b,
                        &gout[b * sd..(b + 1) * sd],
                        &probs[b * hss..(b + 1) * hss],
                        &q[b * sd..(b + 1) * sd],
                        &k[b * sd..(b + 1) * sd],
                        heads,
                        s,
                        d,
                        &v[b * sd..(b + 1) * sd],
                        causal,
                    );
                });
            return (gq, gk, gv);
        }
    }
    for b in 0..batch {
        attention_block_backward(
            &mut gq[b * sd..(b + 1) * sd],
            &mut gk[b * sd..(b + 1) * sd],
            &mut gv[b * sd..(b + 1) * sd],
            &gout[b * sd..(b + 1) * sd],
            &probs[b * hss..(b + 1) * hss],
            &q[b * sd..(b + 1) * sd],
            &k[b * sd..(b + 1) * sd],
            heads,
            s,
            d,
            &v[b * sd..(b + 1) * sd],
            causal,
        );
    }
    (gq, gk, gv)
}
