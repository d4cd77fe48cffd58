//! Checkpoint file: one human-readable JSON header line (parameter manifest
//! plus caller metadata), a newline, then the raw little-endian f32 payload
//! in manifest order. Byte offsets in the manifest are relative to the start
//! of the payload. Round trips are bit-exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "popattn.checkpoint.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    /// Caller-owned metadata: model config, artifact hashes.
    pub manifest: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet<f32>,
    manifest: serde_json::Value,
) -> Result<()> {
    let mut records = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (_, p) in params.iter() {
        records.push(ParamRecord {
            name: p.name().to_string(),
            shape: p.value.shape().to_vec(),
            dtype: "f32le".to_string(),
            offset,
        });
        offset += (p.value.numel() * 4) as u64;
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        manifest,
        params: records,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset as usize);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet<f32>)> {
    let bytes = fs::read(path)?;
    let fmt = |offset: u64, msg: String| Error::Format {
        path: path.display().to_string(),
        offset,
        msg,
    };
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| fmt(bytes.len() as u64, "missing header line".to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| fmt(0, format!("header is not valid JSON: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(fmt(0, format!("unknown format tag {:?}", header.format)));
    }
    let payload = &bytes[nl + 1..];
    let mut params = ParamSet::new();
    for rec in &header.params {
        if rec.dtype != "f32le" {
            return Err(fmt(0, format!("unsupported dtype {:?}", rec.dtype)));
        }
        let numel: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(fmt(
                (nl + 1 + payload.len()) as u64,
                format!(
                    "payload truncated: parameter {:?} needs bytes {start}..{end}, have {}",
                    rec.name,
                    payload.len()
                ),
            ));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(rec.shape.clone(), data)?;
        params.add(rec.name.clone(), tensor)?;
    }
    Ok((header, params))
}
