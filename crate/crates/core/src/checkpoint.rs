//! Parameter checkpoints: a text manifest naming each tensor and its shape,
//! followed by the flat little-endian f32 payloads in manifest order.
//! Round-trips are byte-exact.
//!
//! Layout:
//! ```text
//! rulex-checkpoint v1\n
//! {"tensors":[{"name":"input.w","shape":[64,64]}, ...]}\n
//! <raw little-endian f32 payloads, concatenated in manifest order>
//! ```

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &str = "rulex-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match model config: {0}")]
    Mismatch(String),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    tensors: Vec<TensorEntry>,
}

pub fn save_params<W: Write>(params: &ModelParams, w: &mut W) -> Result<(), CheckpointError> {
    let named = params.named();
    let manifest = Manifest {
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut *w, &manifest)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    writeln!(w)?;
    let mut payload = Vec::new();
    for (_, t) in &named {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Loads a checkpoint into a parameter set shaped by `config`. Names and
/// shapes must match the config's traversal exactly.
pub fn load_params<R: Read>(
    config: &ModelConfig,
    r: &mut R,
) -> Result<ModelParams, CheckpointError> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic line {:?}",
            line.trim_end()
        )));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end())
        .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;

    let mut params = zeroed_params(config);
    {
        let named = params.named_mut();
        if named.len() != manifest.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors in checkpoint, config expects {}",
                manifest.tensors.len(),
                named.len()
            )));
        }
        for ((name, tensor), entry) in named.into_iter().zip(&manifest.tensors) {
            if name != entry.name {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {:?} where {:?} expected",
                    entry.name, name
                )));
            }
            if tensor.shape != entry.shape {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {name}: shape {:?} vs expected {:?}",
                    entry.shape, tensor.shape
                )));
            }
            let mut buf = vec![0u8; tensor.numel() * 4];
            reader.read_exact(&mut buf).map_err(|e| {
                CheckpointError::Format(format!("payload for {name} truncated: {e}"))
            })?;
            for (i, chunk) in buf.chunks_exact(4).enumerate() {
                tensor.data[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Format("trailing bytes after payload".into()));
    }
    Ok(params)
}

pub fn save_params_to_path(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    save_params(params, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_params_from_path(
    config: &ModelConfig,
    path: &Path,
) -> Result<ModelParams, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    load_params(config, &mut file)
}

/// Parameter set with every tensor zeroed, shaped for `config`.
pub fn zeroed_params(config: &ModelConfig) -> ModelParams {
    let mut params = crate::model::init_params(config, 0).expect("validated config");
    for (_, t) in params.named_mut() {
        t.data.fill(0.0);
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            max_seq_len: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let params = init_params(&config(), 21).unwrap();
        let mut bytes = Vec::new();
        save_params(&params, &mut bytes).unwrap();
        let loaded = load_params(&config(), &mut bytes.as_slice()).unwrap();
        assert_eq!(params.to_flat(), loaded.to_flat());
        let mut bytes2 = Vec::new();
        save_params(&loaded, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn wrong_config_is_rejected() {
        let params = init_params(&config(), 21).unwrap();
        let mut bytes = Vec::new();
        save_params(&params, &mut bytes).unwrap();
        let other = ModelConfig {
            num_layers: 2,
            ..config()
        };
        assert!(load_params(&other, &mut bytes.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let params = init_params(&config(), 21).unwrap();
        let mut bytes = Vec::new();
        save_params(&params, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 10);
        assert!(load_params(&config(), &mut bytes.as_slice()).is_err());
    }
}
