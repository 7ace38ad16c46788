//! Adam training loop with the published warmup/decay schedule and
//! in-training evaluation on the regime's held-out episodes.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint;
use crate::eval::{classify_outcome, OutcomeHistogram};
use crate::model::{
    self, build_forward, label_from_logits, ModelConfig, ModelError, ModelParams, TokenSequence,
};
use crate::rng;
use crate::stimuli::{
    self, PartialExposureSpec, SequenceExample, StimulusError, StimulusVocab, VocabConfig,
    CONTEXT_PAIRS,
};
use crate::tensor::Graph;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("learning rate undefined at step 0")]
    StepZero,
    #[error("non-finite loss at step {step}; last good checkpoint kept")]
    NanLoss { step: u64 },
    #[error("non-finite gradient in {param} at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("no evaluation checkpoints in the averaging window")]
    NoCheckpoints,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stimulus(#[from] StimulusError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Training regime: which sequence builder feeds the model and how it is
/// evaluated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Fixed stimulus-label map; contexts uninformative; eval on held-out BX.
    Inweights,
    /// 4-shot 3-way pretraining; eval on few-shot accuracy and on
    /// partial-exposure bias episodes with fresh specs.
    Fewshot,
    /// Partial-exposure sequences whose query label is always the BW label;
    /// eval on fresh specs.
    Rulepretrain,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::Inweights => "inweights",
            Regime::Fewshot => "fewshot",
            Regime::Rulepretrain => "rulepretrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Fewshot,
            batch_size: 32,
            total_steps: 200_000,
            base_lr: 3e-4,
            warmup_steps: 4_000,
            eval_every: 500,
            eval_episodes: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.eval_episodes == 0 {
            return Err(TrainError::Config("batch and eval sizes must be positive".into()));
        }
        if self.total_steps <= self.warmup_steps {
            return Err(TrainError::Config(format!(
                "total_steps {} must exceed warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup, then inverse-square-root decay:
/// `min(base/warmup * step, sqrt(warmup) * base / sqrt(step))`.
/// Both branches meet at `step == warmup`.
pub fn lr_at(step: u64, base_lr: f64, warmup_steps: u64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::StepZero);
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    let warm = base_lr / w * s;
    let decay = w.powf(0.5) * base_lr * s.powf(-0.5);
    Ok(warm.min(decay))
}

/// Adam moment buffers, flat and aligned with [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over the flat gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[f32],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as f32;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let lr = lr as f32;
    let mut off = 0;
    for (_, tensor) in params.named_mut() {
        let n = tensor.numel();
        let g = &grads[off..off + n];
        let m = &mut state.m[off..off + n];
        let v = &mut state.v[off..off + n];
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        off += n;
    }
    debug_assert_eq!(off, grads.len());
    Ok(())
}

/// One evaluation checkpoint: the outcome histogram over the regime's bias
/// episodes, plus few-shot accuracy where the regime defines it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub step: u64,
    pub train_loss: f32,
    pub histogram: OutcomeHistogram,
    pub fewshot_accuracy: Option<f64>,
}

/// Everything one training run produced, sufficient for summaries and
/// reproducibility checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    pub checkpoints: Vec<CheckpointEval>,
    pub final_step: u64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub record: RunRecord,
}

/// Artifact file names inside a run directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const RECORD_FILE: &str = "run_record.json";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";

/// Runs one seed of the configured regime. With `out_dir` set, appends
/// per-step metrics to `metrics.csv`, keeps `checkpoint_latest.bin` at every
/// evaluation, and writes the run record and final checkpoint at the end.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    vocab_config: &VocabConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    vocab_config.validate()?;
    if vocab_config.stimulus_dim() != model_config.d_model {
        return Err(TrainError::Config(format!(
            "stimulus dim {} must equal d_model {}",
            vocab_config.stimulus_dim(),
            model_config.d_model
        )));
    }
    if model_config.max_seq_len < 2 * CONTEXT_PAIRS + 1 {
        return Err(TrainError::Config(format!(
            "max_seq_len {} below sequence length {}",
            model_config.max_seq_len,
            2 * CONTEXT_PAIRS + 1
        )));
    }

    let vocab = stimuli::build_vocab(vocab_config, seed)?;
    // The in-weights regime stores one fixed class-label map in weights.
    let fixed_spec = PartialExposureSpec::random(
        &mut rng::rng_for(seed, rng::stream::EPISODE_SPEC, 0),
        vocab_config,
    );

    let mut params = model::init_params(model_config, seed)?;
    let mut adam = AdamState::new(params.num_params());
    let mut grads_flat = vec![0.0f32; params.num_params()];
    let mut record = RunRecord {
        seed,
        model: model_config.clone(),
        train: train_config.clone(),
        vocab: vocab_config.clone(),
        checkpoints: Vec::new(),
        final_step: 0,
    };

    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
            writeln!(
                w,
                "step,loss,lr,rule_frequency,exemplar_frequency,other_frequency,fewshot_accuracy"
            )?;
            Some(w)
        }
        None => None,
    };

    let mut dropout_rng = rng::rng_for(seed, rng::stream::DROPOUT, 0);
    for step in 1..=train_config.total_steps {
        let lr = lr_at(step, train_config.base_lr, train_config.warmup_steps)?;

        // Assemble the batch; episode indices make data independent of
        // threading and batch size changes never reuse a stream.
        let mut seqs = Vec::with_capacity(train_config.batch_size);
        for i in 0..train_config.batch_size {
            let episode = (step - 1) * train_config.batch_size as u64 + i as u64;
            let mut r = rng::rng_for(seed, rng::stream::TRAIN_BATCH, episode);
            let example = build_train_example(train_config.regime, &vocab, &fixed_spec, &mut r)?;
            seqs.push(to_token_sequence(&example, model_config)?);
        }
        let seq_refs: Vec<&TokenSequence> = seqs.iter().collect();
        let targets: Vec<usize> = seqs.iter().map(|s| s.target).collect();

        let mut graph = Graph::new();
        let built = build_forward(
            &mut graph,
            &params,
            &seq_refs,
            true,
            if model_config.dropout > 0.0 {
                Some(&mut dropout_rng)
            } else {
                None
            },
        )?;
        let loss_node = graph.cross_entropy_mean(built.logits, targets).map_err(ModelError::from)?;
        let loss = graph.scalar_value(loss_node);
        if !loss.is_finite() {
            if let Some(w) = metrics.as_mut() {
                w.flush()?;
            }
            return Err(TrainError::NanLoss { step });
        }
        graph.backward(loss_node).map_err(ModelError::from)?;

        let mut off = 0;
        for ((name, tensor), node) in params.named().iter().zip(&built.param_nodes) {
            let n = tensor.numel();
            let g = graph.grad(*node).expect("param gradient populated");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: name.clone(),
                    step,
                });
            }
            grads_flat[off..off + n].copy_from_slice(g);
            off += n;
        }
        adam_step(&mut params, &grads_flat, &mut adam, lr)?;

        let eval_now = step % train_config.eval_every == 0 || step == train_config.total_steps;
        let mut eval_fields = String::from(",,,");
        if eval_now {
            let eval = evaluate_checkpoint(
                train_config.regime,
                &params,
                &vocab,
                &fixed_spec,
                model_config,
                train_config.eval_episodes,
                seed,
                step,
                loss,
            )?;
            let [fr, fe, fo] = eval.histogram.frequencies();
            eval_fields = format!(
                "{fr},{fe},{fo},{}",
                eval.fewshot_accuracy.map(|a| a.to_string()).unwrap_or_default()
            );
            record.checkpoints.push(eval);
            if let Some(dir) = out_dir {
                checkpoint::save_params_to_path(&params, &dir.join(LATEST_CHECKPOINT))?;
            }
            log::info!(
                "step {step}: loss {loss:.4}, lr {lr:.2e}, hist {:?}",
                record.checkpoints.last().map(|c| c.histogram)
            );
        }
        if let Some(w) = metrics.as_mut() {
            if eval_now {
                writeln!(w, "{step},{loss},{lr},{eval_fields}")?;
            } else {
                writeln!(w, "{step},{loss},{lr},,,,")?;
            }
        }
    }
    record.final_step = train_config.total_steps;

    if let Some(dir) = out_dir {
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
        checkpoint::save_params_to_path(&params, &dir.join(FINAL_CHECKPOINT))?;
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| TrainError::Config(format!("record serialization: {e}")))?;
        std::fs::write(dir.join(RECORD_FILE), json)?;
    }
    Ok(TrainOutcome { params, record })
}

fn build_train_example<R: rand::Rng>(
    regime: Regime,
    vocab: &StimulusVocab,
    fixed_spec: &PartialExposureSpec,
    r: &mut R,
) -> Result<SequenceExample, StimulusError> {
    match regime {
        Regime::Inweights => stimuli::build_inweights_example(vocab, fixed_spec, false, r),
        Regime::Fewshot => stimuli::build_fewshot_sequence(vocab, r),
        Regime::Rulepretrain => stimuli::build_rule_pretraining_sequence(vocab, r),
    }
}

pub fn to_token_sequence(
    example: &SequenceExample,
    config: &ModelConfig,
) -> Result<TokenSequence, ModelError> {
    let context: Vec<(&[f32], usize)> = example
        .context
        .iter()
        .map(|(s, l)| (s.as_slice(), *l))
        .collect();
    TokenSequence::from_pairs(&context, &example.query, example.target, config)
}

/// Predicted labels for a set of sequences, evaluated in batches.
pub fn predict_batch(
    params: &ModelParams,
    seqs: &[TokenSequence],
    batch_size: usize,
) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let logits = model::forward_batch(params, &refs)?;
        let vocab = params.config.label_vocab_size;
        for row in logits.chunks(vocab) {
            out.push(label_from_logits(row).0);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_checkpoint(
    regime: Regime,
    params: &ModelParams,
    vocab: &StimulusVocab,
    fixed_spec: &PartialExposureSpec,
    model_config: &ModelConfig,
    episodes: usize,
    seed: u64,
    step: u64,
    train_loss: f32,
) -> Result<CheckpointEval, TrainError> {
    let step_seed = rng::chain(seed, step);
    let mut histogram = OutcomeHistogram::default();
    let mut fewshot_accuracy = None;

    // Bias episodes: in-weights uses the run's fixed spec; the in-context
    // regimes draw a fresh spec per episode.
    let mut specs = Vec::with_capacity(episodes);
    let mut seqs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut r = rng::rng_for(step_seed, rng::stream::EVAL_EPISODE, i as u64);
        let (spec, example) = match regime {
            Regime::Inweights => (
                fixed_spec.clone(),
                stimuli::build_inweights_example(vocab, fixed_spec, true, &mut r)?,
            ),
            Regime::Fewshot | Regime::Rulepretrain => {
                let spec = PartialExposureSpec::random(&mut r, &vocab.config);
                let ex = stimuli::build_partial_exposure_sequence(vocab, &spec, &mut r)?;
                (spec, ex)
            }
        };
        seqs.push(to_token_sequence(&example, model_config)?);
        specs.push(spec);
    }
    let predictions = predict_batch(params, &seqs, 32)?;
    for (spec, predicted) in specs.iter().zip(&predictions) {
        histogram.record(classify_outcome(spec, *predicted));
    }

    if regime == Regime::Fewshot {
        let mut correct = 0usize;
        let mut seqs = Vec::with_capacity(episodes);
        let mut targets = Vec::with_capacity(episodes);
        for i in 0..episodes {
            let mut r = rng::rng_for(step_seed, rng::stream::EVAL_FEWSHOT, i as u64);
            let example = stimuli::build_fewshot_sequence(vocab, &mut r)?;
            targets.push(example.target);
            seqs.push(to_token_sequence(&example, model_config)?);
        }
        let predictions = predict_batch(params, &seqs, 32)?;
        for (p, t) in predictions.iter().zip(&targets) {
            if p == t {
                correct += 1;
            }
        }
        fewshot_accuracy = Some(correct as f64 / episodes as f64);
    }

    Ok(CheckpointEval {
        step,
        train_loss,
        histogram,
        fewshot_accuracy,
    })
}

/// Mean and 1.96-standard-error halfwidth across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanWithError {
    pub mean: f64,
    pub halfwidth: f64,
}

/// Across-run summary of the evaluation histograms averaged over the last
/// half of each run's checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rule_consistent: MeanWithError,
    pub exemplar_alternative: MeanWithError,
    pub other: MeanWithError,
    pub fewshot_accuracy: Option<MeanWithError>,
    pub runs: usize,
    /// Standard error is undefined for one run; reported as zero with this
    /// flag set.
    pub single_run: bool,
}

fn mean_and_halfwidth(values: &[f64]) -> MeanWithError {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Bit-identical runs have exactly zero spread; don't let the mean's
    // rounding manufacture a nonzero standard error.
    if values.len() < 2 || values.windows(2).all(|w| w[0] == w[1]) {
        return MeanWithError {
            mean,
            halfwidth: 0.0,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    MeanWithError {
        mean,
        halfwidth: 1.96 * (var / n).sqrt(),
    }
}

/// Per-run mean frequencies over the final half of its checkpoints.
pub fn run_window_means(record: &RunRecord) -> Result<[f64; 4], TrainError> {
    if record.checkpoints.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let start = record.checkpoints.len() / 2;
    let window = &record.checkpoints[start..];
    let mut acc = [0.0f64; 4];
    let mut acc_n = 0usize;
    let mut fs_n = 0usize;
    for c in window {
        let f = c.histogram.frequencies();
        acc[0] += f[0];
        acc[1] += f[1];
        acc[2] += f[2];
        if let Some(a) = c.fewshot_accuracy {
            acc[3] += a;
            fs_n += 1;
        }
        acc_n += 1;
    }
    acc[0] /= acc_n as f64;
    acc[1] /= acc_n as f64;
    acc[2] /= acc_n as f64;
    acc[3] = if fs_n > 0 { acc[3] / fs_n as f64 } else { f64::NAN };
    Ok(acc)
}

/// Summarizes one or more completed runs: per-run window means, then the
/// across-seed mean with a 1.96-standard-error halfwidth.
pub fn summarize_runs(records: &[RunRecord]) -> Result<RunSummary, TrainError> {
    if records.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let mut rule = Vec::new();
    let mut exemplar = Vec::new();
    let mut other = Vec::new();
    let mut fewshot = Vec::new();
    for record in records {
        let [r, e, o, f] = run_window_means(record)?;
        rule.push(r);
        exemplar.push(e);
        other.push(o);
        if !f.is_nan() {
            fewshot.push(f);
        }
    }
    Ok(RunSummary {
        rule_consistent: mean_and_halfwidth(&rule),
        exemplar_alternative: mean_and_halfwidth(&exemplar),
        other: mean_and_halfwidth(&other),
        fewshot_accuracy: if fewshot.is_empty() {
            None
        } else {
            Some(mean_and_halfwidth(&fewshot))
        },
        runs: records.len(),
        single_run: records.len() == 1,
    })
}

/// Runs the same configuration across several seeds.
pub fn train_seeds(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    vocab_config: &VocabConfig,
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<(Vec<RunRecord>, Vec<PathBuf>), TrainError> {
    let mut records = Vec::new();
    let mut dirs = Vec::new();
    for &seed in seeds {
        let dir = out_root.map(|root| root.join(format!("seed{seed}")));
        let outcome = train(model_config, train_config, vocab_config, seed, dir.as_deref())?;
        records.push(outcome.record);
        if let Some(d) = dir {
            dirs.push(d);
        }
    }
    Ok((records, dirs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_published_formula() {
        // Exact evaluations of min(3e-4/4000*s, sqrt(4000)*3e-4/sqrt(s)).
        let lr = |s| lr_at(s, 3e-4, 4000).unwrap();
        assert!((lr(4000) - 3e-4).abs() / 3e-4 < 1e-12);
        assert!((lr(1000) - 7.5e-5).abs() / 7.5e-5 < 1e-12);
        assert!((lr(16000) - 1.5e-4).abs() / 1.5e-4 < 1e-12);
    }

    #[test]
    fn schedule_rejects_step_zero() {
        assert!(matches!(lr_at(0, 3e-4, 4000), Err(TrainError::StepZero)));
    }

    #[test]
    fn schedule_is_continuous_and_monotone_around_warmup() {
        let lr = |s| lr_at(s, 3e-4, 4000).unwrap();
        assert!((lr(3999) - lr(4000)).abs() < 1e-7);
        assert!((lr(4001) - lr(4000)).abs() < 1e-7);
        for s in 1..4000u64 {
            assert!(lr(s) < lr(s + 1) + 1e-15);
        }
        for s in 4000..8000u64 {
            assert!(lr(s) >= lr(s + 1));
        }
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let config = ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            max_seq_len: 5,
            ..ModelConfig::default()
        };
        let mut params = model::init_params(&config, 3).unwrap();
        let before = params.to_flat();
        let mut state = AdamState::new(params.num_params());
        let grads = vec![0.0f32; params.num_params()];
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(before, params.to_flat());
    }

    #[test]
    fn adam_first_step_matches_hand_computed_scalar() {
        // For a single scalar with gradient g, the bias-corrected first
        // update is exactly -lr * g / (|g| + eps).
        let config = ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            max_seq_len: 5,
            ..ModelConfig::default()
        };
        let mut params = model::init_params(&config, 3).unwrap();
        let before = params.to_flat();
        let mut state = AdamState::new(params.num_params());
        let mut grads = vec![0.0f32; params.num_params()];
        grads[17] = 0.3;
        let lr = 0.01f64;
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        let after = params.to_flat();
        let expected = before[17] - (lr as f32) * 0.3 / (0.3 + state.epsilon);
        assert!((after[17] - expected).abs() < 1e-7);
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            if i != 17 {
                assert_eq!(b, a);
            }
        }
    }

    #[test]
    fn window_means_use_last_half_of_checkpoints() {
        let mk = |rule: u64, step: u64| CheckpointEval {
            step,
            train_loss: 0.0,
            histogram: OutcomeHistogram {
                rule_consistent: rule,
                exemplar_alternative: 10 - rule,
                other: 0,
            },
            fewshot_accuracy: None,
        };
        let record = RunRecord {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            checkpoints: vec![mk(0, 1), mk(0, 2), mk(10, 3), mk(10, 4)],
            final_step: 4,
        };
        let [r, e, o, _] = run_window_means(&record).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(e, 0.0);
        assert_eq!(o, 0.0);
    }

    #[test]
    fn summary_two_runs_matches_hand_arithmetic() {
        // Rule frequencies 0.4 and 0.6: mean 0.5, 1.96*SE = 1.96*0.1.
        let mk_record = |rule: u64| RunRecord {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            checkpoints: vec![CheckpointEval {
                step: 1,
                train_loss: 0.0,
                histogram: OutcomeHistogram {
                    rule_consistent: rule,
                    exemplar_alternative: 10 - rule,
                    other: 0,
                },
                fewshot_accuracy: None,
            }],
            final_step: 1,
        };
        let summary = summarize_runs(&[mk_record(4), mk_record(6)]).unwrap();
        assert!((summary.rule_consistent.mean - 0.5).abs() < 1e-12);
        assert!((summary.rule_consistent.halfwidth - 1.96 * 0.1).abs() < 1e-9);
        assert!(!summary.single_run);
    }

    #[test]
    fn summary_identical_runs_has_zero_error() {
        let mk_record = || RunRecord {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            checkpoints: vec![CheckpointEval {
                step: 1,
                train_loss: 0.0,
                histogram: OutcomeHistogram {
                    rule_consistent: 7,
                    exemplar_alternative: 3,
                    other: 0,
                },
                fewshot_accuracy: None,
            }],
            final_step: 1,
        };
        let records: Vec<RunRecord> = (0..10).map(|_| mk_record()).collect();
        let summary = summarize_runs(&records).unwrap();
        assert_eq!(summary.rule_consistent.halfwidth, 0.0);
        assert!((summary.rule_consistent.mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn summary_single_run_flags_n1() {
        let record = RunRecord {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            checkpoints: vec![CheckpointEval {
                step: 1,
                train_loss: 0.0,
                histogram: OutcomeHistogram {
                    rule_consistent: 5,
                    exemplar_alternative: 5,
                    other: 0,
                },
                fewshot_accuracy: None,
            }],
            final_step: 1,
        };
        let summary = summarize_runs(&[record]).unwrap();
        assert!(summary.single_run);
        assert_eq!(summary.rule_consistent.halfwidth, 0.0);
    }

    #[test]
    fn summary_requires_checkpoints() {
        let record = RunRecord {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab: VocabConfig::default(),
            checkpoints: vec![],
            final_step: 0,
        };
        assert!(matches!(
            summarize_runs(&[record]),
            Err(TrainError::NoCheckpoints)
        ));
    }

    #[test]
    fn config_requires_total_steps_above_warmup() {
        let config = TrainConfig {
            total_steps: 4000,
            warmup_steps: 4000,
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
