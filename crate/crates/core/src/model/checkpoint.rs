//! Checkpoint files: one JSON header line, then little-endian `f64` blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::TransformerParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the blob after the header line.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub manifest: Vec<ManifestEntry>,
}

impl CheckpointHeader {
    pub fn param_count(&self) -> usize {
        self.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    pub fn embedding_param_count(&self) -> usize {
        self.manifest
            .iter()
            .filter(|e| e.name.starts_with("embed."))
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TransformerParams,
    pub vocab_hash: String,
    pub step: u64,
}

pub fn encode_checkpoint(params: &TransformerParams, vocab_hash: &str, step: u64) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        step,
        manifest,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &TransformerParams, vocab_hash: &str, step: u64) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, vocab_hash, step)?)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok((header, &bytes[nl + 1..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, blobs) = split_header(bytes)?;
    let mut named = Vec::with_capacity(header.manifest.len());
    for e in &header.manifest {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        let raw = blobs
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("blob for {} is truncated", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let params = TransformerParams::from_tensors(&header.config, named)?;
    if !params.is_finite() {
        return Err(Error::Checkpoint("checkpoint holds non-finite parameters".into()));
    }
    Ok(Checkpoint {
        params,
        vocab_hash: header.vocab_hash,
        step: header.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Reads only the header line.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}
