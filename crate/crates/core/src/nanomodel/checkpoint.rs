//! Tensor file format shared by checkpoints, edits and masks.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header
//! `{meta, tensors: [{name, shape, offset}]}`, then little-endian `f32`
//! payloads. `offset` is in bytes from the start of the payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, TransformerModel, Weights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EDLABTNS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_tensors(meta: &Value, tensors: &[(String, ArrayViewD<'_, f64>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 4;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &x in t.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let bad = |m: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..hend])?;
    let payload = &bytes[hend..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + 4 * n > payload.len() {
            return Err(bad(format!("tensor {} has a bad offset", e.name)));
        }
        let data = payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        expected = e.offset + 4 * n;
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| bad(err.to_string()))?;
        tensors.push((e.name, arr));
    }
    if expected != payload.len() {
        return Err(bad("trailing bytes after payload".into()));
    }
    Ok(TensorFile {
        meta: header.meta,
        tensors,
    })
}

pub fn write_tensor_file(path: &Path, meta: &Value, tensors: &[(String, ArrayViewD<'_, f64>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_tensors(meta, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes, path)
}

impl TransformerModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({ "kind": "model", "config": self.config });
        encode_tensors(&meta, &self.weights.tensors())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let file = decode_tensors(bytes, path)?;
        let bad = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        let config: ModelConfig = serde_json::from_value(
            file.meta
                .get("config")
                .cloned()
                .ok_or_else(|| bad("header has no config".into()))?,
        )?;
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        {
            let mut slots = weights.tensors_mut();
            if slots.len() != file.tensors.len() {
                return Err(bad(format!(
                    "expected {} tensors, found {}",
                    slots.len(),
                    file.tensors.len()
                )));
            }
            for ((name, slot), (fname, t)) in slots.iter_mut().zip(&file.tensors) {
                if name != fname || slot.shape() != t.shape() {
                    return Err(bad(format!("tensor {fname} does not match slot {name}")));
                }
                slot.assign(t);
            }
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
