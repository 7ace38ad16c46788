//! Dataset emission and loading.
//!
//! Two on-disk forms:
//! - newline-delimited JSON, one [`SequenceRecord`] per line, carrying full
//!   provenance (episode index, regime, episode spec, vectors, target);
//! - a compact binary form mirroring the checkpoint convention (text magic,
//!   one JSON header line, then flat little-endian payloads) that keeps
//!   only vectors and labels.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::stimuli::{
    build_control_sequence, build_fewshot_sequence, build_inweights_example,
    build_partial_exposure_sequence, build_rule_pretraining_sequence, PartialExposureSpec,
    SequenceExample, StimulusError, StimulusVocab, CONTEXT_PAIRS,
};

pub const BINARY_MAGIC: &str = "rulex-sequences v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Stimulus(#[from] StimulusError),
}

/// Every dataset regime the `gen` interface can emit. The in-weights pair
/// shares one spec fixed by the dataset seed; the other partial-exposure
/// regimes draw a fresh spec per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenRegime {
    Fewshot,
    PartialExposure,
    Control,
    InweightsTrain,
    InweightsEval,
    Rulepretrain,
}

impl GenRegime {
    pub const ALL: [GenRegime; 6] = [
        GenRegime::Fewshot,
        GenRegime::PartialExposure,
        GenRegime::Control,
        GenRegime::InweightsTrain,
        GenRegime::InweightsEval,
        GenRegime::Rulepretrain,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            GenRegime::Fewshot => "fewshot",
            GenRegime::PartialExposure => "partial_exposure",
            GenRegime::Control => "control",
            GenRegime::InweightsTrain => "inweights_train",
            GenRegime::InweightsEval => "inweights_eval",
            GenRegime::Rulepretrain => "rulepretrain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| r.tag() == s)
    }
}

/// `(seed, regime, episode)` fully determine the example.
pub fn generate_example(
    regime: GenRegime,
    vocab: &StimulusVocab,
    seed: u64,
    episode: u64,
) -> Result<SequenceExample, StimulusError> {
    let mut r = rng::rng_for(seed, rng::stream::DATASET, episode);
    match regime {
        GenRegime::Fewshot => build_fewshot_sequence(vocab, &mut r),
        GenRegime::PartialExposure => {
            let spec = PartialExposureSpec::random(&mut r, &vocab.config);
            build_partial_exposure_sequence(vocab, &spec, &mut r)
        }
        GenRegime::Control => {
            let spec = PartialExposureSpec::random(&mut r, &vocab.config);
            build_control_sequence(vocab, &spec, &mut r)
        }
        GenRegime::InweightsTrain => {
            let spec = fixed_spec(vocab, seed);
            build_inweights_example(vocab, &spec, false, &mut r)
        }
        GenRegime::InweightsEval => {
            let spec = fixed_spec(vocab, seed);
            build_inweights_example(vocab, &spec, true, &mut r)
        }
        GenRegime::Rulepretrain => build_rule_pretraining_sequence(vocab, &mut r),
    }
}

/// The single spec an in-weights dataset (and training run) stores in
/// weights; the same derivation the trainer uses.
pub fn fixed_spec(vocab: &StimulusVocab, seed: u64) -> PartialExposureSpec {
    PartialExposureSpec::random(
        &mut rng::rng_for(seed, rng::stream::EPISODE_SPEC, 0),
        &vocab.config,
    )
}

/// One emitted sequence with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub episode: u64,
    #[serde(flatten)]
    pub example: SequenceExample,
}

pub fn write_jsonl<W: Write>(records: &[SequenceRecord], w: &mut W) -> Result<(), DatasetError> {
    for record in records {
        let line =
            serde_json::to_string(record).map_err(|e| DatasetError::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: Read>(r: &mut R) -> Result<Vec<SequenceRecord>, DatasetError> {
    let reader = io::BufReader::new(r);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Format(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct BinaryHeader {
    regime: String,
    records: usize,
    context_pairs: usize,
    stimulus_dim: usize,
}

/// A sequence without provenance, as stored in the binary form.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainSequence {
    pub context: Vec<(Vec<f32>, usize)>,
    pub query: Vec<f32>,
    pub target: usize,
}

pub fn write_binary<W: Write>(
    regime: GenRegime,
    examples: &[SequenceExample],
    w: &mut W,
) -> Result<(), DatasetError> {
    let dim = examples
        .first()
        .map(|e| e.query.len())
        .unwrap_or_default();
    let header = BinaryHeader {
        regime: regime.tag().to_string(),
        records: examples.len(),
        context_pairs: CONTEXT_PAIRS,
        stimulus_dim: dim,
    };
    writeln!(w, "{BINARY_MAGIC}")?;
    serde_json::to_writer(&mut *w, &header).map_err(|e| DatasetError::Format(e.to_string()))?;
    writeln!(w)?;
    let mut payload = Vec::new();
    for ex in examples {
        payload.extend_from_slice(&(ex.target as u32).to_le_bytes());
        for (stim, label) in &ex.context {
            payload.extend_from_slice(&(*label as u32).to_le_bytes());
            for v in stim {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &ex.query {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<(String, Vec<PlainSequence>), DatasetError> {
    let mut reader = io::BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != BINARY_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad magic {:?}",
            line.trim_end()
        )));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: BinaryHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| DatasetError::Format(format!("header: {e}")))?;
    fn read_u32<R: Read>(reader: &mut R) -> Result<u32, DatasetError> {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let mut out = Vec::with_capacity(header.records);
    for _ in 0..header.records {
        let target = read_u32(&mut reader)? as usize;
        let mut context = Vec::with_capacity(header.context_pairs);
        for _ in 0..header.context_pairs {
            let label = read_u32(&mut reader)? as usize;
            let mut stim = vec![0.0f32; header.stimulus_dim];
            let mut buf = vec![0u8; header.stimulus_dim * 4];
            reader.read_exact(&mut buf)?;
            for (i, chunk) in buf.chunks_exact(4).enumerate() {
                stim[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            context.push((stim, label));
        }
        let mut query = vec![0.0f32; header.stimulus_dim];
        let mut buf = vec![0u8; header.stimulus_dim * 4];
        reader.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            query[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        out.push(PlainSequence {
            context,
            query,
            target,
        });
    }
    Ok((header.regime, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{build_vocab, VocabConfig};

    #[test]
    fn jsonl_round_trip_preserves_records() {
        let vocab = build_vocab(&VocabConfig::default(), 31).unwrap();
        let records: Vec<SequenceRecord> = (0..5)
            .map(|episode| SequenceRecord {
                episode,
                example: generate_example(GenRegime::Fewshot, &vocab, 31, episode).unwrap(),
            })
            .collect();
        let mut bytes = Vec::new();
        write_jsonl(&records, &mut bytes).unwrap();
        let loaded = read_jsonl(&mut bytes.as_slice()).unwrap();
        assert_eq!(records, loaded);
    }

    #[test]
    fn binary_round_trip_preserves_vectors_exactly() {
        let vocab = build_vocab(&VocabConfig::default(), 32).unwrap();
        let examples: Vec<SequenceExample> = (0..4)
            .map(|e| generate_example(GenRegime::PartialExposure, &vocab, 32, e).unwrap())
            .collect();
        let mut bytes = Vec::new();
        write_binary(GenRegime::PartialExposure, &examples, &mut bytes).unwrap();
        let (regime, loaded) = read_binary(&mut bytes.as_slice()).unwrap();
        assert_eq!(regime, "partial_exposure");
        assert_eq!(loaded.len(), examples.len());
        for (p, e) in loaded.iter().zip(&examples) {
            assert_eq!(p.query, e.query);
            assert_eq!(p.target, e.target);
            assert_eq!(p.context, e.context);
        }
    }

    #[test]
    fn generation_is_deterministic_per_episode() {
        let vocab = build_vocab(&VocabConfig::default(), 33).unwrap();
        for regime in GenRegime::ALL {
            let a = generate_example(regime, &vocab, 33, 7).unwrap();
            let b = generate_example(regime, &vocab, 33, 7).unwrap();
            assert_eq!(a, b, "{regime:?}");
            let c = generate_example(regime, &vocab, 33, 8).unwrap();
            assert_ne!(a, c, "{regime:?} episodes must differ");
        }
    }

    #[test]
    fn regime_tags_parse_back() {
        for regime in GenRegime::ALL {
            assert_eq!(GenRegime::parse(regime.tag()), Some(regime));
        }
        assert_eq!(GenRegime::parse("nope"), None);
    }
}
