use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sample_seed, SceneConfig, SceneSample};
use crate::error::{MuseError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MUSEDS01";
pub const DATASET_VERSION: u32 = 1;

/// Single-line JSON header following the magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub classes: usize,
    pub base_seed: u64,
}

impl DatasetHeader {
    pub fn new(count: usize, base_seed: u64, config: &SceneConfig) -> Self {
        DatasetHeader {
            version: DATASET_VERSION,
            count: count as u64,
            image_h: config.image_size,
            image_w: config.image_size,
            patch: config.patch,
            classes: config.classes,
            base_seed,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { image_size: self.image_h, patch: self.patch, classes: self.classes, objects: 1 }
    }

    fn sample_bytes(&self) -> u64 {
        let px = (self.image_h * self.image_w) as u64;
        px * 3 * 4 + px + 2
    }
}

pub fn encode_dataset(header: &DatasetHeader, samples: &[SceneSample]) -> Result<Vec<u8>> {
    if header.count != samples.len() as u64 {
        return Err(MuseError::Argument(format!("header count {} but {} samples", header.count, samples.len())));
    }
    let px = header.image_h * header.image_w;
    let mut out = Vec::with_capacity(64 + samples.len() * header.sample_bytes() as usize);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(serde_json::to_string(header).expect("header serialises").as_bytes());
    out.push(b'\n');
    for s in samples {
        if s.image.len() != px * 3 || s.mask.len() != px {
            return Err(MuseError::Argument("sample size does not match header".into()));
        }
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.mask);
        out.extend_from_slice(&s.label.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    if bytes.len() < DATASET_MAGIC.len() || &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
        return Err(MuseError::Parse { offset: 0, msg: "bad magic, expected MUSEDS01".into() });
    }
    let start = DATASET_MAGIC.len();
    let nl = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| MuseError::Parse { offset: start as u64, msg: "unterminated header line".into() })?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[start..start + nl])
        .map_err(|e| MuseError::Parse { offset: start as u64, msg: format!("malformed header: {e}") })?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(MuseError::Version { expected: DATASET_VERSION, found: version });
    }
    let header: DatasetHeader = serde_json::from_value(raw)
        .map_err(|e| MuseError::Parse { offset: start as u64, msg: format!("malformed header: {e}") })?;
    if header.image_h != header.image_w || header.image_h == 0 {
        return Err(MuseError::Parse { offset: start as u64, msg: "only square images are supported".into() });
    }

    let mut pos = start + nl + 1;
    let payload = (bytes.len() - pos) as u64;
    let expected = header.count * header.sample_bytes();
    if payload < expected {
        return Err(MuseError::Truncated { expected, found: payload });
    }
    if payload > expected {
        return Err(MuseError::Parse { offset: pos as u64 + expected, msg: "trailing bytes after last sample".into() });
    }
    let px = header.image_h * header.image_w;
    let mut samples = Vec::with_capacity(header.count as usize);
    for i in 0..header.count {
        let image = bytes[pos..pos + px * 12]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += px * 12;
        let mask = bytes[pos..pos + px].to_vec();
        pos += px;
        let label = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
        pos += 2;
        samples.push(SceneSample { image, mask, label, seed: sample_seed(header.base_seed, i) });
    }
    Ok((header, samples))
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[SceneSample]) -> Result<()> {
    let bytes = encode_dataset(header, samples)?;
    let mut f = fs::File::create(path).map_err(|e| MuseError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| MuseError::io(path, e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let bytes = fs::read(path).map_err(|e| MuseError::io(path, e))?;
    decode_dataset(&bytes)
}
