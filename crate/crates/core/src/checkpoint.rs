//! Checkpoint container.
//!
//! Layout: the 8-byte magic `ECGNAT1\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the raw little-endian tensor payloads in table
//! order. Offsets in the table are relative to the first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"ECGNAT1\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors of one precision plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut t = t.clone();
        t.set_requires_grad(false);
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.numel() * T::DTYPE.size()) as u64;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not an ECG-NAT checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let width = T::DTYPE.size();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is {:?}, expected {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + numel * width)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Precision of a stored checkpoint, read from its first tensor entry.
pub fn stored_dtype(path: &Path) -> Result<Option<DType>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not an ECG-NAT checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok(header.tensors.first().map(|e| e.dtype))
}
