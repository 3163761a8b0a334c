//! Single-file weight container with named tensor segments.
//!
//! Layout (little-endian): magic `OCCM`, format version `u32`, metadata
//! length `u32` and JSON bytes, tensor count `u32`, then per tensor its name
//! length `u32`, UTF-8 name, rows `u32`, cols `u32`; the `f32` data of all
//! tensors follows in table order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{join, Params};

pub const MAGIC: &[u8; 4] = b"OCCM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: BTreeMap<String, Matrix<f32>>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            metadata: Value::Object(Default::default()),
            tensors: BTreeMap::new(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    /// Stores every leaf of `params` under `prefix`.
    pub fn insert(&mut self, prefix: &str, params: &impl Params<Matrix<f32>>) {
        params.visit(prefix, &mut |name, m| {
            self.tensors.insert(name.to_string(), m.clone());
        });
    }

    pub fn has_segment(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors.keys().any(|k| k == prefix || k.starts_with(&dotted))
    }

    pub fn remove_segment(&mut self, prefix: &str) {
        let dotted = format!("{prefix}.");
        self.tensors.retain(|k, _| k != prefix && !k.starts_with(&dotted));
    }

    /// Shape of a stored tensor.
    pub fn shape(&self, name: &str) -> Option<(usize, usize)> {
        self.tensors.get(name).map(|m| m.shape())
    }

    /// Copies the tensors under `prefix` into `params`, which must have
    /// matching names and shapes.
    pub fn restore(&self, prefix: &str, params: &mut impl Params<Matrix<f32>>) -> Result<()> {
        let mut err = None;
        params.visit_mut(prefix, &mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(bad(format!("missing tensor {name}"))),
                Some(t) if t.shape() != m.shape() => {
                    err = Some(bad(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        m.shape()
                    )))
                }
                Some(t) => m.data.copy_from_slice(&t.data),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        }
        for m in self.tensors.values() {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, keeping only tensors whose segment is listed in
    /// `segments` (all of them when `None`).
    pub fn from_bytes_filtered(bytes: &[u8], segments: Option<&[&str]>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            table.push((name, rows, cols));
        }
        let keep = |name: &str| {
            segments.is_none_or(|segs| {
                segs.iter()
                    .any(|s| name == *s || name.starts_with(&join(s, "")))
            })
        };
        let mut tensors = BTreeMap::new();
        for (name, rows, cols) in table {
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| bad(format!("tensor {name} too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            if keep(&name) {
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                if tensors.insert(name.clone(), Matrix { rows, cols, data }).is_some() {
                    return Err(bad(format!("duplicate tensor {name}")));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_filtered(bytes, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_segments(path: &Path, segments: &[&str]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_filtered(&bytes, Some(segments))
    }
}
