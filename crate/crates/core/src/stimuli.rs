//! Gaussian-cluster stimuli and the sequence regimes built from them.
//!
//! A stimulus concatenates one subvector per feature slot; each subvector is
//! drawn from a finite pre-sampled bank around a per-class centroid. The
//! partial-exposure design exposes three of the four combinations of two
//! binary-ish feature values (`AX`, `AW`, `BW`, the latter twice as often)
//! plus an extra class `C` carrying a third label, and asks about the
//! held-out combination `BX`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Context pairs per sequence.
pub const CONTEXT_PAIRS: usize = 12;
/// Copies of (AX, AW, BW, C) in a partial-exposure context. Doubling BW
/// balances label frequencies at 4/4/4.
pub const PARTIAL_COUNTS: [usize; 4] = [2, 2, 4, 4];
/// Copies of (AX, BW, C) in a control context.
pub const CONTROL_COUNTS: [usize; 3] = [4, 4, 4];
/// Few-shot regime: `ways` classes, `shots` occurrences each.
pub const FEWSHOT_WAYS: usize = 3;
pub const FEWSHOT_SHOTS: usize = 4;

#[derive(Debug, Error)]
pub enum StimulusError {
    #[error("invalid vocab config: {0}")]
    Config(String),
    #[error("class {0:?} out of range for {1} slots of {2} classes")]
    BadClass(Vec<usize>, usize, usize),
    #[error("invalid exposure spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub num_slots: usize,
    pub feature_len: usize,
    pub classes_per_slot: usize,
    pub bank_size: usize,
    pub covariance_scale: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            num_slots: 2,
            feature_len: 32,
            classes_per_slot: 10,
            bank_size: 100,
            covariance_scale: 0.1,
        }
    }
}

impl VocabConfig {
    pub fn validate(&self) -> Result<(), StimulusError> {
        if self.num_slots < 2 {
            return Err(StimulusError::Config(
                "at least two feature slots required".into(),
            ));
        }
        if self.feature_len == 0 || self.classes_per_slot < 2 || self.bank_size == 0 {
            return Err(StimulusError::Config("all sizes must be positive".into()));
        }
        if self.covariance_scale <= 0.0 {
            return Err(StimulusError::Config(
                "covariance scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Dimensionality of a full stimulus vector.
    pub fn stimulus_dim(&self) -> usize {
        self.num_slots * self.feature_len
    }
}

/// One feature slot: per-class centroids and finite sample banks.
#[derive(Debug, Clone)]
struct SlotVocab {
    /// `[classes][feature_len]`, flattened.
    centroids: Vec<f32>,
    /// `[classes][bank_size][feature_len]`, flattened.
    bank: Vec<f32>,
}

/// Per-slot class centroids plus the pre-drawn sample banks every stimulus
/// is assembled from.
#[derive(Debug, Clone)]
pub struct StimulusVocab {
    pub config: VocabConfig,
    pub seed: u64,
    slots: Vec<SlotVocab>,
}

/// Centroids are standard normal per dimension; bank entries add
/// `Normal(0, covariance_scale)` noise per dimension.
pub fn build_vocab(config: &VocabConfig, seed: u64) -> Result<StimulusVocab, StimulusError> {
    use rand_distr::{Distribution, StandardNormal};
    config.validate()?;
    let len = config.feature_len;
    let noise_std = (config.covariance_scale as f32).sqrt();
    let slots = (0..config.num_slots)
        .map(|slot| {
            let mut r = rng::rng_for(seed, rng::stream::VOCAB, slot as u64);
            let centroids: Vec<f32> = (0..config.classes_per_slot * len)
                .map(|_| StandardNormal.sample(&mut r))
                .collect();
            let mut bank = vec![0.0f32; config.classes_per_slot * config.bank_size * len];
            for cls in 0..config.classes_per_slot {
                let centroid = &centroids[cls * len..(cls + 1) * len];
                for entry in 0..config.bank_size {
                    let off = (cls * config.bank_size + entry) * len;
                    for d in 0..len {
                        let z: f32 = StandardNormal.sample(&mut r);
                        bank[off + d] = centroid[d] + z * noise_std;
                    }
                }
            }
            SlotVocab { centroids, bank }
        })
        .collect();
    Ok(StimulusVocab {
        config: config.clone(),
        seed,
        slots,
    })
}

impl StimulusVocab {
    pub fn centroid(&self, slot: usize, class: usize) -> &[f32] {
        let len = self.config.feature_len;
        &self.slots[slot].centroids[class * len..(class + 1) * len]
    }

    pub fn bank_entry(&self, slot: usize, class: usize, entry: usize) -> &[f32] {
        let len = self.config.feature_len;
        let off = (class * self.config.bank_size + entry) * len;
        &self.slots[slot].bank[off..off + len]
    }

    /// Nearest centroid (Euclidean) to a subvector, per slot.
    pub fn nearest_class(&self, slot: usize, subvector: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for cls in 0..self.config.classes_per_slot {
            let c = self.centroid(slot, cls);
            let d: f64 = c
                .iter()
                .zip(subvector)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = cls;
            }
        }
        best
    }
}

/// A stimulus class: one subvector class id per feature slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StimulusClass(pub Vec<usize>);

impl StimulusClass {
    pub fn pair(slot1: usize, slot2: usize) -> Self {
        Self(vec![slot1, slot2])
    }

    pub fn validate(&self, config: &VocabConfig) -> Result<(), StimulusError> {
        if self.0.len() != config.num_slots || self.0.iter().any(|&c| c >= config.classes_per_slot)
        {
            return Err(StimulusError::BadClass(
                self.0.clone(),
                config.num_slots,
                config.classes_per_slot,
            ));
        }
        Ok(())
    }
}

/// Uniformly chosen bank entries per slot, concatenated.
pub fn sample_stimulus<R: Rng>(
    vocab: &StimulusVocab,
    class: &StimulusClass,
    rng: &mut R,
) -> Result<Vec<f32>, StimulusError> {
    class.validate(&vocab.config)?;
    let mut out = Vec::with_capacity(vocab.config.stimulus_dim());
    for (slot, &cls) in class.0.iter().enumerate() {
        let entry = rng.random_range(0..vocab.config.bank_size);
        out.extend_from_slice(vocab.bank_entry(slot, cls, entry));
    }
    Ok(out)
}

/// Class assignment and label map for one partial-exposure episode: slot-1
/// values A/B, slot-2 values X/W, the extra class C, and the three labels.
/// Exposed combinations are AX, AW and BW (doubled); the query is always BX.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialExposureSpec {
    pub a: usize,
    pub b: usize,
    pub x: usize,
    pub w: usize,
    pub c: StimulusClass,
    pub label_a: usize,
    pub label_b: usize,
    pub label_c: usize,
}

impl PartialExposureSpec {
    /// Fresh episode spec: distinct classes per slot, C disjoint from the
    /// A/B and X/W values, labels a random bijection onto {0,1,2}.
    pub fn random<R: Rng>(rng: &mut R, config: &VocabConfig) -> Self {
        let n = config.classes_per_slot;
        let a = rng.random_range(0..n);
        let b = loop {
            let v = rng.random_range(0..n);
            if v != a {
                break v;
            }
        };
        let x = rng.random_range(0..n);
        let w = loop {
            let v = rng.random_range(0..n);
            if v != x {
                break v;
            }
        };
        let c0 = loop {
            let v = rng.random_range(0..n);
            if v != a && v != b {
                break v;
            }
        };
        let c1 = loop {
            let v = rng.random_range(0..n);
            if v != x && v != w {
                break v;
            }
        };
        let mut labels = [0usize, 1, 2];
        labels.shuffle(rng);
        Self {
            a,
            b,
            x,
            w,
            c: StimulusClass::pair(c0, c1),
            label_a: labels[0],
            label_b: labels[1],
            label_c: labels[2],
        }
    }

    pub fn validate(&self, config: &VocabConfig) -> Result<(), StimulusError> {
        if self.a == self.b || self.x == self.w {
            return Err(StimulusError::BadSpec("A==B or X==W".into()));
        }
        if self.label_a == self.label_b
            || self.label_a == self.label_c
            || self.label_b == self.label_c
        {
            return Err(StimulusError::BadSpec("labels not pairwise distinct".into()));
        }
        self.c.validate(config)?;
        if self.c.0[0] == self.a || self.c.0[0] == self.b {
            return Err(StimulusError::BadSpec(
                "extra class shares a slot-1 value with A/B".into(),
            ));
        }
        if self.c.0[1] == self.x || self.c.0[1] == self.w {
            return Err(StimulusError::BadSpec(
                "extra class shares a slot-2 value with X/W".into(),
            ));
        }
        for &v in [self.a, self.b, self.x, self.w].iter() {
            if v >= config.classes_per_slot {
                return Err(StimulusError::BadSpec("class id out of range".into()));
            }
        }
        Ok(())
    }

    pub fn class_ax(&self) -> StimulusClass {
        StimulusClass::pair(self.a, self.x)
    }

    pub fn class_aw(&self) -> StimulusClass {
        StimulusClass::pair(self.a, self.w)
    }

    pub fn class_bw(&self) -> StimulusClass {
        StimulusClass::pair(self.b, self.w)
    }

    /// The held-out combination.
    pub fn query_class(&self) -> StimulusClass {
        StimulusClass::pair(self.b, self.x)
    }

    /// Exposed combinations with their labels, one entry each.
    pub fn exposed(&self) -> Vec<(StimulusClass, usize)> {
        vec![
            (self.class_ax(), self.label_a),
            (self.class_aw(), self.label_a),
            (self.class_bw(), self.label_b),
            (self.c.clone(), self.label_c),
        ]
    }

    /// The partial-exposure context multiset, expanded to 12 items.
    pub fn context_items(&self) -> Vec<(StimulusClass, usize)> {
        let combos = self.exposed();
        let mut items = Vec::with_capacity(CONTEXT_PAIRS);
        for ((class, label), count) in combos.into_iter().zip(PARTIAL_COUNTS) {
            for _ in 0..count {
                items.push((class.clone(), label));
            }
        }
        items
    }

    /// The control context multiset (AW removed, counts equalized).
    pub fn control_items(&self) -> Vec<(StimulusClass, usize)> {
        let combos = [
            (self.class_ax(), self.label_a),
            (self.class_bw(), self.label_b),
            (self.c.clone(), self.label_c),
        ];
        let mut items = Vec::with_capacity(CONTEXT_PAIRS);
        for ((class, label), count) in combos.into_iter().zip(CONTROL_COUNTS) {
            for _ in 0..count {
                items.push((class.clone(), label));
            }
        }
        items
    }
}

/// Where a sequence came from, sufficient to re-derive or audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Provenance {
    FewShot {
        classes: Vec<StimulusClass>,
        labels: Vec<usize>,
        query_index: usize,
    },
    PartialExposure {
        spec: PartialExposureSpec,
    },
    Control {
        spec: PartialExposureSpec,
    },
    InWeightsTrain {
        spec: PartialExposureSpec,
    },
    InWeightsEval {
        spec: PartialExposureSpec,
    },
    RulePretrain {
        spec: PartialExposureSpec,
    },
}

impl Provenance {
    pub fn regime_tag(&self) -> &'static str {
        match self {
            Provenance::FewShot { .. } => "few_shot",
            Provenance::PartialExposure { .. } => "partial_exposure",
            Provenance::Control { .. } => "control",
            Provenance::InWeightsTrain { .. } => "in_weights_train",
            Provenance::InWeightsEval { .. } => "in_weights_eval",
            Provenance::RulePretrain { .. } => "rule_pretrain",
        }
    }
}

/// A generated sequence: 12 (stimulus, label) context pairs, a query
/// stimulus and its bookkeeping target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceExample {
    pub context: Vec<(Vec<f32>, usize)>,
    pub query: Vec<f32>,
    pub target: usize,
    pub provenance: Provenance,
}

/// 4-shot 3-way few-shot sequence: three distinct stimulus classes, labels
/// a fresh random bijection, query drawn from the three.
pub fn build_fewshot_sequence<R: Rng>(
    vocab: &StimulusVocab,
    rng: &mut R,
) -> Result<SequenceExample, StimulusError> {
    let n = vocab.config.classes_per_slot;
    let total = n * n;
    debug_assert_eq!(vocab.config.num_slots, 2, "few-shot draws over slot pairs");
    let picks = rand::seq::index::sample(rng, total, FEWSHOT_WAYS);
    let classes: Vec<StimulusClass> = picks
        .iter()
        .map(|i| StimulusClass::pair(i / n, i % n))
        .collect();
    let mut labels = [0usize, 1, 2];
    labels.shuffle(rng);

    let mut slots: Vec<usize> = (0..FEWSHOT_WAYS)
        .flat_map(|c| std::iter::repeat_n(c, FEWSHOT_SHOTS))
        .collect();
    slots.shuffle(rng);
    let context = slots
        .iter()
        .map(|&c| Ok((sample_stimulus(vocab, &classes[c], rng)?, labels[c])))
        .collect::<Result<Vec<_>, StimulusError>>()?;

    let query_index = rng.random_range(0..FEWSHOT_WAYS);
    let query = sample_stimulus(vocab, &classes[query_index], rng)?;
    Ok(SequenceExample {
        context,
        query,
        target: labels[query_index],
        provenance: Provenance::FewShot {
            classes,
            labels: labels.to_vec(),
            query_index,
        },
    })
}

fn build_context_from_items<R: Rng>(
    vocab: &StimulusVocab,
    items: &[(StimulusClass, usize)],
    rng: &mut R,
) -> Result<Vec<(Vec<f32>, usize)>, StimulusError> {
    let mut ordered: Vec<&(StimulusClass, usize)> = items.iter().collect();
    ordered.shuffle(rng);
    ordered
        .into_iter()
        .map(|(class, label)| Ok((sample_stimulus(vocab, class, rng)?, *label)))
        .collect()
}

/// Partial-exposure sequence: shuffled {AX:2, AW:2, BW:4, C:4} context and
/// a fresh BX query. The recorded target is the rule answer `label_b`;
/// evaluation classifies every outcome regardless.
pub fn build_partial_exposure_sequence<R: Rng>(
    vocab: &StimulusVocab,
    spec: &PartialExposureSpec,
    rng: &mut R,
) -> Result<SequenceExample, StimulusError> {
    spec.validate(&vocab.config)?;
    let context = build_context_from_items(vocab, &spec.context_items(), rng)?;
    let query = sample_stimulus(vocab, &spec.query_class(), rng)?;
    Ok(SequenceExample {
        context,
        query,
        target: spec.label_b,
        provenance: Provenance::PartialExposure { spec: spec.clone() },
    })
}

/// Control sequence: shuffled {AX:4, BW:4, C:4} context and a BX query.
/// No single feature separates the labels; only exemplar similarity can.
pub fn build_control_sequence<R: Rng>(
    vocab: &StimulusVocab,
    spec: &PartialExposureSpec,
    rng: &mut R,
) -> Result<SequenceExample, StimulusError> {
    spec.validate(&vocab.config)?;
    let context = build_context_from_items(vocab, &spec.control_items(), rng)?;
    let query = sample_stimulus(vocab, &spec.query_class(), rng)?;
    Ok(SequenceExample {
        context,
        query,
        target: spec.label_b,
        provenance: Provenance::Control { spec: spec.clone() },
    })
}

/// In-weights example: the query class is drawn from the exposure multiset
/// (BW at double weight) with its fixed label, and the context is 12 i.i.d.
/// draws from the same exposed classes - independent of the query, hence
/// uninformative. Evaluation examples query the held-out BX instead.
pub fn build_inweights_example<R: Rng>(
    vocab: &StimulusVocab,
    spec: &PartialExposureSpec,
    evaluation: bool,
    rng: &mut R,
) -> Result<SequenceExample, StimulusError> {
    spec.validate(&vocab.config)?;
    let pool = spec.context_items();
    let context = pool
        .iter()
        .map(|_| {
            let (class, label) = &pool[rng.random_range(0..pool.len())];
            Ok((sample_stimulus(vocab, class, rng)?, *label))
        })
        .collect::<Result<Vec<_>, StimulusError>>()?;
    let (query_class, target, provenance) = if evaluation {
        (
            spec.query_class(),
            spec.label_b,
            Provenance::InWeightsEval { spec: spec.clone() },
        )
    } else {
        let (class, label) = pool[rng.random_range(0..pool.len())].clone();
        (class, label, Provenance::InWeightsTrain { spec: spec.clone() })
    };
    let query = sample_stimulus(vocab, &query_class, rng)?;
    Ok(SequenceExample {
        context,
        query,
        target,
        provenance,
    })
}

/// Rule-pretraining sequence: a fresh spec per sequence, the usual
/// partial-exposure context, and the query labeled with the BW label so the
/// task is only solvable by the slot-1 rule.
pub fn build_rule_pretraining_sequence<R: Rng>(
    vocab: &StimulusVocab,
    rng: &mut R,
) -> Result<SequenceExample, StimulusError> {
    let spec = PartialExposureSpec::random(rng, &vocab.config);
    let context = build_context_from_items(vocab, &spec.context_items(), rng)?;
    let query = sample_stimulus(vocab, &spec.query_class(), rng)?;
    Ok(SequenceExample {
        context,
        query,
        target: spec.label_b,
        provenance: Provenance::RulePretrain { spec },
    })
}
