use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderSpec;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"PHAMACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in scalars from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub spec: EncoderSpec,
    pub epoch: usize,
    /// Free-form metric history (e.g. per-epoch validation accuracy).
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `MAGIC | u32 version | u64 manifest length | manifest JSON | f32 LE data`.
pub fn save_checkpoint(
    path: &Path,
    spec: &EncoderSpec,
    params: &ParamSet<f32>,
    epoch: usize,
    metrics: serde_json::Value,
) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        spec: spec.clone(),
        epoch,
        metrics,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(20 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamSet<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| bad(&format!("bad manifest: {e}")))?;
    let data = &bytes[20 + len..];
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| bad(&format!("tensor {} is truncated", e.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(
            e.name.clone(),
            Tensor {
                shape: e.shape.clone(),
                data: values,
            },
        );
    }
    Ok((manifest, params))
}
