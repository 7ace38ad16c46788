//! Small pre-norm transformer over stimulus-label token sequences.
//!
//! A sequence is `2*context_pairs + 1` tokens: alternating stimulus and
//! label tokens, ending with the query stimulus. Stimulus tokens arrive
//! already `d_model`-dimensional; label tokens are one-hot. Both pass
//! through a shared learned input projection, then learned positional
//! embeddings, `num_layers` residual blocks, a final layer norm, and a
//! linear head read off the final (query) position only.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Weight-matrix initialization scale (normal, mean zero).
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("bad sequence: {0}")]
    BadSequence(String),
    #[error("label {label} out of range for vocab {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_multiplier: usize,
    pub label_vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
    /// Decoder-style masking; flip to false for bidirectional attention.
    pub causal: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            d_model: 64,
            num_heads: 8,
            ff_multiplier: 4,
            label_vocab_size: 3,
            max_seq_len: 25,
            dropout: 0.0,
            causal: true,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0
            || self.d_model == 0
            || self.num_heads == 0
            || self.ff_multiplier == 0
            || self.label_vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::Config("all sizes must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.label_vocab_size > self.d_model {
            return Err(ModelError::Config(format!(
                "label_vocab_size {} exceeds d_model {} (one-hot labels must fit)",
                self.label_vocab_size, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable tensors, in a fixed traversal order shared by the
/// optimizer, the checkpoint format and the gradient checker.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Deterministic scaled-normal initialization.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut r = rng::rng_for(seed, rng::stream::PARAM_INIT, 0);
    let d = config.d_model;
    let ff = d * config.ff_multiplier;
    let v = config.label_vocab_size;
    let mut mat = |rows: usize, cols: usize| Tensor::randn(vec![rows, cols], INIT_STD, &mut r);
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: mat(d, d),
            bq: zeros(d),
            wk: mat(d, d),
            bk: zeros(d),
            wv: mat(d, d),
            bv: zeros(d),
            wo: mat(d, d),
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w1: mat(d, ff),
            b1: zeros(ff),
            w2: mat(ff, d),
            b2: zeros(d),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        input_w: mat(d, d),
        input_b: zeros(d),
        pos: mat(config.max_seq_len, d),
        layers,
        ln_f_gain: ones(d),
        ln_f_bias: zeros(d),
        out_w: mat(d, v),
        out_b: zeros(v),
    })
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("static shape")
}

impl ModelParams {
    /// Named tensors in traversal order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("input.w".into(), &self.input_w),
            ("input.b".into(), &self.input_b),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1.bias"), &l.ln1_bias));
            out.push((format!("layer{i}.attn.wq"), &l.wq));
            out.push((format!("layer{i}.attn.bq"), &l.bq));
            out.push((format!("layer{i}.attn.wk"), &l.wk));
            out.push((format!("layer{i}.attn.bk"), &l.bk));
            out.push((format!("layer{i}.attn.wv"), &l.wv));
            out.push((format!("layer{i}.attn.bv"), &l.bv));
            out.push((format!("layer{i}.attn.wo"), &l.wo));
            out.push((format!("layer{i}.attn.bo"), &l.bo));
            out.push((format!("layer{i}.ln2.gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2.bias"), &l.ln2_bias));
            out.push((format!("layer{i}.ff.w1"), &l.w1));
            out.push((format!("layer{i}.ff.b1"), &l.b1));
            out.push((format!("layer{i}.ff.w2"), &l.w2));
            out.push((format!("layer{i}.ff.b2"), &l.b2));
        }
        out.push(("ln_f.gain".into(), &self.ln_f_gain));
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("input.w".into(), &mut self.input_w),
            ("input.b".into(), &mut self.input_b),
            ("pos".into(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1.bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.attn.wq"), &mut l.wq));
            out.push((format!("layer{i}.attn.bq"), &mut l.bq));
            out.push((format!("layer{i}.attn.wk"), &mut l.wk));
            out.push((format!("layer{i}.attn.bk"), &mut l.bk));
            out.push((format!("layer{i}.attn.wv"), &mut l.wv));
            out.push((format!("layer{i}.attn.bv"), &mut l.bv));
            out.push((format!("layer{i}.attn.wo"), &mut l.wo));
            out.push((format!("layer{i}.attn.bo"), &mut l.bo));
            out.push((format!("layer{i}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2.bias"), &mut l.ln2_bias));
            out.push((format!("layer{i}.ff.w1"), &mut l.w1));
            out.push((format!("layer{i}.ff.b1"), &mut l.b1));
            out.push((format!("layer{i}.ff.w2"), &mut l.w2));
            out.push((format!("layer{i}.ff.b2"), &mut l.b2));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f_gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f_bias));
        out.push(("out.w".into(), &mut self.out_w));
        out.push(("out.b".into(), &mut self.out_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenation of all tensors in traversal order.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (_, t) in self.named() {
            flat.extend_from_slice(&t.data);
        }
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        for (_, t) in self.named_mut() {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// One-hot label token embedded in a `d_model`-length vector.
pub fn encode_label_token(label: usize, config: &ModelConfig) -> Result<Vec<f32>, ModelError> {
    if label >= config.label_vocab_size {
        return Err(ModelError::LabelOutOfRange {
            label,
            vocab: config.label_vocab_size,
        });
    }
    let mut v = vec![0.0; config.d_model];
    v[label] = 1.0;
    Ok(v)
}

/// Token sequence ready for the model: flat row-major `[seq_len, d_model]`
/// tokens plus the query's target label.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<f32>,
    seq_len: usize,
    d_model: usize,
    pub target: usize,
}

impl TokenSequence {
    /// Interleaves (stimulus, label) context pairs and appends the query
    /// stimulus: `s_0, l_0, s_1, l_1, ..., query`.
    pub fn from_pairs(
        context: &[(&[f32], usize)],
        query: &[f32],
        target: usize,
        config: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let d = config.d_model;
        let seq_len = 2 * context.len() + 1;
        if seq_len > config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq_len,
                max: config.max_seq_len,
            });
        }
        if target >= config.label_vocab_size {
            return Err(ModelError::LabelOutOfRange {
                label: target,
                vocab: config.label_vocab_size,
            });
        }
        let mut tokens = Vec::with_capacity(seq_len * d);
        for (stim, label) in context {
            if stim.len() != d {
                return Err(ModelError::BadSequence(format!(
                    "stimulus length {} != d_model {d}",
                    stim.len()
                )));
            }
            tokens.extend_from_slice(stim);
            tokens.extend_from_slice(&encode_label_token(*label, config)?);
        }
        if query.len() != d {
            return Err(ModelError::BadSequence(format!(
                "query length {} != d_model {d}",
                query.len()
            )));
        }
        tokens.extend_from_slice(query);
        Ok(Self {
            tokens,
            seq_len,
            d_model: d,
            target,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, position: usize) -> &[f32] {
        &self.tokens[position * self.d_model..(position + 1) * self.d_model]
    }

    /// Structural check: odd positions hold one-hot label tokens, the
    /// sequence ends on a stimulus, and the length is `2k + 1`.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.seq_len % 2 == 0 {
            return Err(ModelError::BadSequence(format!(
                "even sequence length {}",
                self.seq_len
            )));
        }
        for p in (1..self.seq_len).step_by(2) {
            let tok = self.token(p);
            let ones = tok.iter().filter(|&&v| v == 1.0).count();
            let zeros = tok.iter().filter(|&&v| v == 0.0).count();
            let hot = tok.iter().position(|&v| v == 1.0);
            if ones != 1 || zeros != tok.len() - 1 || hot.is_none_or(|h| h >= config.label_vocab_size)
            {
                return Err(ModelError::BadSequence(format!(
                    "position {p} is not a one-hot label token"
                )));
            }
        }
        Ok(())
    }

    /// Writes this sequence's tokens into row `b` of a packed batch.
    fn write_into(&self, buf: &mut [f32], b: usize) {
        let n = self.tokens.len();
        buf[b * n..(b + 1) * n].copy_from_slice(&self.tokens);
    }
}

/// Node handles for one forward build.
pub struct ForwardBuild {
    pub logits: NodeId,
    /// Parameter leaves in [`ModelParams::named`] order (empty when built
    /// without gradients).
    pub param_nodes: Vec<NodeId>,
    /// Attention nodes per layer, for inspection in tests.
    pub attention_nodes: Vec<NodeId>,
    /// Final-layer (post-norm) states, `[batch*seq_len, d_model]`.
    pub states: NodeId,
}

/// Builds the forward graph for a batch of equal-length sequences.
/// `trainable` inserts parameters as gradient leaves; `dropout_rng` enables
/// dropout when the config rate is positive.
pub fn build_forward(
    graph: &mut Graph,
    params: &ModelParams,
    seqs: &[&TokenSequence],
    trainable: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardBuild, ModelError> {
    let config = &params.config;
    config.validate()?;
    if seqs.is_empty() {
        return Err(ModelError::BadSequence("empty batch".into()));
    }
    let s = seqs[0].seq_len;
    let d = config.d_model;
    if s > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: s,
            max: config.max_seq_len,
        });
    }
    let batch = seqs.len();
    let mut tokens = vec![0.0f32; batch * s * d];
    for (b, seq) in seqs.iter().enumerate() {
        if seq.seq_len != s {
            return Err(ModelError::BadSequence(
                "mixed sequence lengths in one batch".into(),
            ));
        }
        if seq.d_model != d {
            return Err(ModelError::BadSequence(format!(
                "sequence d_model {} != model d_model {d}",
                seq.d_model
            )));
        }
        seq.write_into(&mut tokens, b);
    }

    let mut param_nodes = Vec::new();
    let bind = |g: &mut Graph, t: &Tensor, nodes: &mut Vec<NodeId>| -> NodeId {
        let id = if trainable {
            g.param(t.clone())
        } else {
            g.input(t.clone())
        };
        nodes.push(id);
        id
    };

    let x = graph.input(Tensor::new(vec![batch * s, d], tokens)?);
    let input_w = bind(graph, &params.input_w, &mut param_nodes);
    let input_b = bind(graph, &params.input_b, &mut param_nodes);
    let pos = bind(graph, &params.pos, &mut param_nodes);

    let mut h = graph.matmul(x, input_w)?;
    h = graph.add_bias(h, input_b)?;
    h = graph.add_positions(h, pos, s)?;
    h = maybe_dropout(graph, h, config, &mut dropout_rng);

    let mut attention_nodes = Vec::new();
    for layer in &params.layers {
        let ln1_g = bind(graph, &layer.ln1_gain, &mut param_nodes);
        let ln1_b = bind(graph, &layer.ln1_bias, &mut param_nodes);
        let wq = bind(graph, &layer.wq, &mut param_nodes);
        let bq = bind(graph, &layer.bq, &mut param_nodes);
        let wk = bind(graph, &layer.wk, &mut param_nodes);
        let bk = bind(graph, &layer.bk, &mut param_nodes);
        let wv = bind(graph, &layer.wv, &mut param_nodes);
        let bv = bind(graph, &layer.bv, &mut param_nodes);
        let wo = bind(graph, &layer.wo, &mut param_nodes);
        let bo = bind(graph, &layer.bo, &mut param_nodes);
        let ln2_g = bind(graph, &layer.ln2_gain, &mut param_nodes);
        let ln2_b = bind(graph, &layer.ln2_bias, &mut param_nodes);
        let w1 = bind(graph, &layer.w1, &mut param_nodes);
        let b1 = bind(graph, &layer.b1, &mut param_nodes);
        let w2 = bind(graph, &layer.w2, &mut param_nodes);
        let b2 = bind(graph, &layer.b2, &mut param_nodes);

        let normed = graph.layer_norm(h, ln1_g, ln1_b)?;
        let q = graph.matmul(normed, wq)?;
        let q = graph.add_bias(q, bq)?;
        let k = graph.matmul(normed, wk)?;
        let k = graph.add_bias(k, bk)?;
        let v = graph.matmul(normed, wv)?;
        let v = graph.add_bias(v, bv)?;
        let att = graph.attention(q, k, v, config.num_heads, s, config.causal)?;
        attention_nodes.push(att);
        let att = graph.matmul(att, wo)?;
        let att = graph.add_bias(att, bo)?;
        let att = maybe_dropout(graph, att, config, &mut dropout_rng);
        h = graph.add(h, att)?;

        let normed2 = graph.layer_norm(h, ln2_g, ln2_b)?;
        let f = graph.matmul(normed2, w1)?;
        let f = graph.add_bias(f, b1)?;
        let f = match config.activation {
            Activation::Gelu => graph.gelu(f),
            Activation::Relu => graph.relu(f),
        };
        let f = graph.matmul(f, w2)?;
        let f = graph.add_bias(f, b2)?;
        let f = maybe_dropout(graph, f, config, &mut dropout_rng);
        h = graph.add(h, f)?;
    }

    let ln_f_g = bind(graph, &params.ln_f_gain, &mut param_nodes);
    let ln_f_b = bind(graph, &params.ln_f_bias, &mut param_nodes);
    let out_w = bind(graph, &params.out_w, &mut param_nodes);
    let out_b = bind(graph, &params.out_b, &mut param_nodes);

    let states = graph.layer_norm(h, ln_f_g, ln_f_b)?;
    let query_rows: Vec<usize> = (0..batch).map(|b| b * s + s - 1).collect();
    let picked = graph.select_rows(states, query_rows)?;
    let logits = graph.matmul(picked, out_w)?;
    let logits = graph.add_bias(logits, out_b)?;

    if !trainable {
        param_nodes.clear();
    }
    Ok(ForwardBuild {
        logits,
        param_nodes,
        attention_nodes,
        states,
    })
}

fn maybe_dropout(
    graph: &mut Graph,
    x: NodeId,
    config: &ModelConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    match rng {
        Some(r) if config.dropout > 0.0 => graph.dropout(x, config.dropout, r),
        _ => x,
    }
}

/// Logits over the label vocabulary for one sequence.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<Vec<f32>, ModelError> {
    let mut graph = Graph::new();
    let build = build_forward(&mut graph, params, &[seq], false, None)?;
    Ok(graph.data(build.logits).to_vec())
}

/// Logits for a batch, row-major `[batch, label_vocab_size]`.
pub fn forward_batch(
    params: &ModelParams,
    seqs: &[&TokenSequence],
) -> Result<Vec<f32>, ModelError> {
    let mut graph = Graph::new();
    let build = build_forward(&mut graph, params, seqs, false, None)?;
    Ok(graph.data(build.logits).to_vec())
}

/// Final-layer states for every position of one sequence, `[seq_len, d]`.
pub fn forward_states(params: &ModelParams, seq: &TokenSequence) -> Result<Vec<f32>, ModelError> {
    let mut graph = Graph::new();
    let build = build_forward(&mut graph, params, &[seq], false, None)?;
    Ok(graph.data(build.states).to_vec())
}

/// Lowest index wins ties, so evaluation histograms are reproducible.
pub fn argmax_tie_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and the softmax probability vector for one sequence.
pub fn predict_label(
    params: &ModelParams,
    seq: &TokenSequence,
) -> Result<(usize, Vec<f32>), ModelError> {
    let logits = forward(params, seq)?;
    Ok(label_from_logits(&logits))
}

/// Argmax + softmax over one logits row.
pub fn label_from_logits(logits: &[f32]) -> (usize, Vec<f32>) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f32> = exps.iter().map(|&e| (e / sum) as f32).collect();
    (argmax_tie_lowest(logits), probs)
}
