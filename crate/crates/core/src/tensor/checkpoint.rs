//! Named-tensor checkpoint files.
//!
//! Layout: the 8-byte magic `CPDCKPT1`, a little-endian `u64` header length,
//! a JSON header `{"tensors": {name: {"shape": [...], "offset": bytes}}}`,
//! then the float64 payload in little-endian order. Offsets are relative to
//! the start of the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"CPDCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, Entry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> Result<(), CheckpointError> {
    let mut offset = 0u64;
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        entries.insert(name.clone(), Entry { shape: t.shape().to_vec(), offset });
        offset += 8 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors: entries })
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for t in tensors.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = BTreeMap::new();
    for (name, entry) in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * numel;
        if end > payload.len() {
            return Err(CheckpointError::Malformed(format!("tensor {name} runs past end of payload")));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<(), CheckpointError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, tensors)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// SHA-256 over the serialized checkpoint bytes, hex encoded.
pub fn content_hash(tensors: &BTreeMap<String, Tensor>) -> String {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors).expect("writing to memory cannot fail");
    hex::encode(Sha256::digest(&buf))
}
