//! Persistent embedding store.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "FCTE"
//! version  u32      1
//! dim      u32
//! count    u64
//! tag      u32 length + UTF-8 bytes
//! ids      count x (u32 length + UTF-8 bytes)
//! rows     count x dim f32, row-major
//! ```

use std::borrow::Borrow;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::l2_norm;
use crate::vector::{EmbeddingVector, UNIT_TOLERANCE};

pub const MAGIC: &[u8; 4] = b"FCTE";
pub const FORMAT_VERSION: u32 = 1;
/// Fixed-size prefix: magic, version, dim and count.
pub const HEADER_LEN: usize = 20;
/// Row norms read from disk are checked against this looser tolerance.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-4;

/// Opaque image or query identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ItemId(String);

impl ItemId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::InvalidId("empty id".into()));
        }
        if value.contains('\n') || value.contains('\r') {
            return Err(Error::InvalidId(format!("id contains a newline: {value:?}")));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ItemId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ItemId> for String {
    fn from(id: ItemId) -> Self {
        id.0
    }
}

impl Borrow<str> for ItemId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Immutable-after-build collection of unit embeddings keyed by id.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    tag: String,
    ids: Vec<ItemId>,
    rows: Vec<f32>,
    index: HashMap<ItemId, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.tag == other.tag
            && self.ids == other.ids
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize, tag: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("store dim must be positive".into()));
        }
        Ok(Self { dim, tag: tag.into(), ids: Vec::new(), rows: Vec::new(), index: HashMap::new() })
    }

    /// Builds a store from flat row-major data, validating every invariant.
    pub fn from_parts(dim: usize, tag: impl Into<String>, ids: Vec<ItemId>, rows: Vec<f32>) -> Result<Self> {
        Self::from_parts_with_tolerance(dim, tag, ids, rows, UNIT_TOLERANCE)
    }

    fn from_parts_with_tolerance(
        dim: usize,
        tag: impl Into<String>,
        ids: Vec<ItemId>,
        rows: Vec<f32>,
        tolerance: f64,
    ) -> Result<Self> {
        let mut store = Self::new(dim, tag)?;
        if rows.len() != ids.len() * dim {
            return Err(Error::DimMismatch { expected: ids.len() * dim, actual: rows.len() });
        }
        store.index.reserve(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let row = &rows[i * dim..(i + 1) * dim];
            let norm = l2_norm(row);
            if !norm.is_finite() || (norm - 1.0).abs() > tolerance {
                return Err(Error::Norm { id: id.to_string(), norm, tolerance });
            }
            if store.index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.to_string()));
            }
        }
        store.ids = ids;
        store.rows = rows;
        Ok(store)
    }

    pub fn push(&mut self, id: ItemId, vector: &EmbeddingVector<f32>) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, actual: vector.dim() });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.extend_from_slice(vector.as_slice());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, position: usize) -> &[f32] {
        &self.rows[position * self.dim..(position + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Result<&[f32]> {
        self.position(id).map(|p| self.row(p)).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// The stored row for `id`, unchanged.
    pub fn get(&self, id: &str) -> Result<EmbeddingVector<f32>> {
        let row = self.row_by_id(id)?;
        // rows were validated on insert; re-wrapping cannot fail at this tolerance
        EmbeddingVector::from_unit(row.to_vec(), LOAD_NORM_TOLERANCE)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &[f32])> + '_ {
        self.ids.iter().enumerate().map(move |(i, id)| (id, self.row(i)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|id| 4 + id.as_str().len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 + self.tag.len() + id_bytes + self.rows.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        write_str(&mut out, &self.tag);
        for id in &self.ids {
            write_str(&mut out, id.as_str());
        }
        for x in &self.rows {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, origin };
        if cur.take(4)? != MAGIC {
            return Err(Error::format(origin, "bad magic bytes"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        if dim == 0 {
            return Err(Error::format(origin, "dim is zero"));
        }
        let count = usize::try_from(cur.u64()?).map_err(|_| Error::format(origin, "count overflows"))?;
        let tag = cur.string()?;
        // each id needs at least 4 bytes; bound the allocation before trusting count
        if count > cur.remaining() / 4 {
            return Err(Error::format(origin, "truncated id table"));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = cur.string()?;
            ids.push(ItemId::new(raw).map_err(|e| Error::format(origin, e.to_string()))?);
        }
        let payload = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(origin, "row payload size overflows"))?;
        let data = cur.take(payload)?;
        if cur.remaining() != 0 {
            return Err(Error::format(origin, format!("{} trailing bytes", cur.remaining())));
        }
        let rows = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_parts_with_tolerance(dim, tag, ids, rows, LOAD_NORM_TOLERANCE)
    }

    /// Writes the binary format. Output is byte-identical for identical stores.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.origin, format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(b);
        Ok(u64::from_le_bytes(buf))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let origin = self.origin;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(origin, "invalid UTF-8"))
    }
}
