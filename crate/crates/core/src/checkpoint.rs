//! Checkpoint file format, version 1.
//!
//! ```text
//! "QFSCKPT1"                       8 bytes
//! header length n                  u64, little-endian
//! header                           n bytes of UTF-8 JSON
//! tensor data                      little-endian values, in header order
//! ```
//!
//! The header is
//! `{"version": 1, "dtype": "f32", "meta": {...}, "tensors": [{"name", "shape", "dtype", "offset"}, ...]}`
//! with `offset` counted in bytes from the start of the data block. Tensors
//! are written in name order, so equal stores give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use qfsum_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"QFSCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    /// Free-form metadata, e.g. the architecture the weights belong to.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let dtype = T::DTYPE.name().to_string();
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: dtype.clone(),
            offset: data.len(),
        });
        T::to_le_bytes_vec(t.data(), &mut data);
    }
    let header = serde_json::to_vec(&Header {
        version: VERSION,
        dtype,
        meta,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let data = &bytes[header_end..];
    let width = T::DTYPE.size_of();
    let mut store = ParamStore::new();
    for e in header.tensors {
        if e.dtype != T::DTYPE.name() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` is {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE.name()
            )));
        }
        let count: usize = e.shape.iter().product();
        let end = e.offset + count * width;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name)));
        }
        let values = data[e.offset..end].chunks_exact(width).map(T::from_le_chunk).collect();
        store.insert(e.name, Tensor::new(&e.shape, values)?);
    }
    Ok((store, header.meta))
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Header only, for inspection without knowing the dtype.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + n > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    Ok(serde_json::from_slice(&bytes[16..16 + n])?)
}
