//! Binary checkpoints: an 8-byte little-endian manifest length, a JSON
//! manifest, then every tensor as little-endian `f32` in registration
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Position in the ChaCha8 word stream.
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub rng_state: RngState,
    pub tensor_index: Vec<TensorEntry>,
    pub crc32: u32,
}

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub rng_state: RngState,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(params.param_count() * 4);
    let mut index = Vec::with_capacity(params.tensors().len());
    let mut offset = 0;
    for t in params.tensors() {
        index.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for &v in &t.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_cfg: params.config().clone(),
        train_cfg: meta.train_cfg.clone(),
        step: meta.step,
        epoch: meta.epoch,
        rng_state: meta.rng_state,
        tensor_index: index,
        crc32: crc32fast::hash(&payload),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let truncated = || Error::Checkpoint("file is truncated".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
    let header = bytes.get(8..8usize.saturating_add(header_len)).ok_or_else(truncated)?;
    let payload = &bytes[8 + header_len..];

    // Gate on the version before interpreting the rest of the manifest.
    let raw: serde_json::Value = serde_json::from_slice(header)?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Checkpoint("manifest has no format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion(u32::try_from(version).unwrap_or(u32::MAX)));
    }
    let manifest: Manifest = serde_json::from_slice(header)?;

    let mut expected = 0;
    for e in &manifest.tensor_index {
        if e.offset != expected || e.len != e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("bad index entry for '{}'", e.name)));
        }
        expected += e.len;
    }
    if payload.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, index describes {}",
            payload.len(),
            expected * 4
        )));
    }
    let actual = crc32fast::hash(payload);
    if actual != manifest.crc32 {
        return Err(Error::Checksum {
            expected: manifest.crc32,
            actual,
        });
    }
    let tensors = manifest
        .tensor_index
        .iter()
        .map(|e| {
            let data = payload[e.offset * 4..(e.offset + e.len) * 4]
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            (e.name.clone(), e.shape.clone(), data)
        })
        .collect();
    let params = ModelParams::from_tensors(&manifest.model_cfg, tensors)?;
    Ok((
        params,
        CheckpointMeta {
            train_cfg: manifest.train_cfg,
            step: manifest.step,
            epoch: manifest.epoch,
            rng_state: manifest.rng_state,
        },
    ))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
