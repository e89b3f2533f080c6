//! Flat named-tensor checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a JSON
//! manifest (model config plus one entry per tensor with name, shape,
//! dtype and byte offset into the data section), then the tensors as
//! little-endian `f64`. Integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLXDEPTH";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

pub fn write_checkpoint(params: &Parameters, mut w: impl Write) -> Result<()> {
    let mut offset = 0u64;
    let tensors = params
        .named()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
                dtype: "f64".into(),
                offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        config: params.config().clone(),
        tensors,
    })?;
    let mut buf = Vec::with_capacity(20 + manifest.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for t in params.tensors() {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Parameters> {
    let bad = |d: String| Error::format("checkpoint", d);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])?;
    let data = &bytes[data_start..];
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let chunk = data
            .get(start..start + 8 * n)
            .ok_or_else(|| bad(format!("{}: data out of bounds", e.name)))?;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), values)
            .map_err(|err| bad(format!("{}: {err}", e.name)))?;
        named.push((e.name, t));
    }
    Parameters::from_named(&manifest.config, named)
}

pub fn save_checkpoint(params: &Parameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Parameters> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
