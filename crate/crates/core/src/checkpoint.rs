//! Versioned binary archive of named tensors plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SEMI2ICK"
//! version      u32       FORMAT_VERSION
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON:
//!              { "kind", "dtype", "meta", "tensors": [{ "name", "shape", "offset" }] }
//! payload      tensor data in header order, `dtype` little-endian,
//!              offsets counted in elements from the payload start
//! ```
//!
//! Identical contents serialize to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"SEMI2ICK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Shape,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// An ordered set of named tensors with free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor<T>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

impl<T: Scalar> Archive<T> {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Archive { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Archive::get`] but a missing entry is an invalid-checkpoint
    /// error.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    /// Parses `meta` into a typed value.
    pub fn meta_as<M: serde::de::DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| bad(format!("metadata: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape(), offset };
                offset += t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(bad(format!("checkpoint holds {}, expected {}", header.dtype, T::DTYPE)));
        }
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize * T::BYTES;
            let end = start + n * T::BYTES;
            if end > payload.len() {
                return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
            }
            let data = payload[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name, Tensor::from_vec(e.shape, data)?));
        }
        Ok(Archive { kind: header.kind, meta: header.meta, tensors })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidCheckpoint(m) => Error::InvalidCheckpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks the archive kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let a = Self::load(path)?;
        if a.kind != kind {
            return Err(bad(format!("{}: expected a {kind} checkpoint, found {}", path.display(), a.kind)));
        }
        Ok(a)
    }
}
