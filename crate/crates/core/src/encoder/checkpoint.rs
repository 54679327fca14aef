use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, ModelConfig};
use crate::autodiff::{Real, Tensor};
use crate::error::{MuseError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MUSECK01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub stage: u8,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
}

/// Magic, JSON header line, JSON index line, then every tensor as
/// little-endian f32 in declaration order. 64-bit values are rounded.
pub fn encode_checkpoint<T: Real>(params: &EncoderParams<T>, step: u64, stage: u8) -> Vec<u8> {
    let header = CheckpointHeader { version: CHECKPOINT_VERSION, config: params.config.clone(), step, stage };
    let index: Vec<IndexEntry> =
        params.metas.iter().map(|m| IndexEntry { name: m.name.clone(), shape: m.shape.clone() }).collect();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serialises").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&index).expect("index serialises").as_bytes());
    out.push(b'\n');
    for t in &params.values {
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

fn line(bytes: &[u8], start: usize) -> Result<(&[u8], usize)> {
    let len = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| MuseError::Parse { offset: start as u64, msg: "unterminated header line".into() })?;
    Ok((&bytes[start..start + len], start + len + 1))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(CheckpointHeader, EncoderParams<T>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(MuseError::Parse { offset: 0, msg: "bad magic, expected MUSECK01".into() });
    }
    let start = CHECKPOINT_MAGIC.len();
    let (raw, next) = line(bytes, start)?;
    let value: serde_json::Value = serde_json::from_slice(raw)
        .map_err(|e| MuseError::Parse { offset: start as u64, msg: format!("malformed header: {e}") })?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(MuseError::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let header: CheckpointHeader = serde_json::from_value(value)
        .map_err(|e| MuseError::Parse { offset: start as u64, msg: format!("malformed header: {e}") })?;
    let (raw, mut pos) = line(bytes, next)?;
    let index: Vec<IndexEntry> = serde_json::from_slice(raw)
        .map_err(|e| MuseError::Parse { offset: next as u64, msg: format!("malformed tensor index: {e}") })?;

    let expected: u64 = index.iter().map(|e| e.shape.iter().product::<usize>() as u64 * 4).sum();
    let found = (bytes.len() - pos) as u64;
    if found < expected {
        return Err(MuseError::Truncated { expected, found });
    }
    if found > expected {
        return Err(MuseError::Parse { offset: pos as u64 + expected, msg: "trailing bytes after last tensor".into() });
    }
    let mut params = EncoderParams::<T>::init(0, &header.config).map_err(|e| MuseError::Parse {
        offset: start as u64,
        msg: format!("invalid model config: {e}"),
    })?;
    let mut named = Vec::with_capacity(index.len());
    for e in index {
        let n: usize = e.shape.iter().product();
        let data = bytes[pos..pos + n * 4]
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        pos += n * 4;
        let t = Tensor::new(e.shape, data)
            .map_err(|err| MuseError::Parse { offset: pos as u64, msg: format!("tensor {}: {err}", e.name) })?;
        named.push((e.name, t));
    }
    params
        .load_values(named)
        .map_err(|e| MuseError::Parse { offset: next as u64, msg: format!("tensor index does not match config: {e}") })?;
    Ok((header, params))
}

pub fn write_checkpoint<T: Real>(path: &Path, params: &EncoderParams<T>, step: u64, stage: u8) -> Result<()> {
    fs::write(path, encode_checkpoint(params, step, stage)).map_err(|e| MuseError::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(CheckpointHeader, EncoderParams<T>)> {
    let bytes = fs::read(path).map_err(|e| MuseError::io(path, e))?;
    decode_checkpoint(&bytes)
}
