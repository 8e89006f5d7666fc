use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Parameters, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SIMULMT1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<Entry>,
    payload_len: usize,
}

/// Layout: 8-byte magic, u64 LE manifest length, JSON manifest
/// (name, shape, offset per tensor; tied names share an offset), then the
/// flat little-endian f64 payload.
pub fn write_checkpoint<W: Write>(mut w: W, params: &Parameters) -> Result<()> {
    let mut offsets = vec![0usize; params.tensors().len()];
    let mut total = 0;
    for (slot, t) in params.tensors().iter().enumerate() {
        offsets[slot] = total;
        total += t.data.len();
    }
    let tensors = params
        .names()
        .iter()
        .map(|(name, slot)| Entry {
            name: name.clone(),
            shape: params.tensors()[*slot].shape.clone(),
            offset: offsets[*slot],
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        config: params.config().clone(),
        tensors,
        payload_len: total,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(total * 8);
    for t in params.tensors() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Parameters> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    let mut payload = vec![0u8; manifest.payload_len * 8];
    r.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut named = HashMap::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Format(format!("tensor `{}` overruns payload", e.name)))?
            .to_vec();
        named.insert(
            e.name,
            Tensor {
                shape: e.shape,
                data,
            },
        );
    }
    Parameters::from_named(&manifest.config, &named)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &Parameters) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Parameters> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
