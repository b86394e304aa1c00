//! Persisted embedding index.
//!
//! Little-endian layout: `"PRSM"`, u32 version (1), u32 dim, u32 count, then
//! `count` records of `[u32 id_len, id bytes (UTF-8), dim × f32]`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

use super::EmbeddingVector;

pub const STORE_MAGIC: [u8; 4] = *b"PRSM";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, image_id: String, v: EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        self.entries.insert(image_id, v);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(image_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .keys()
            .map(|k| 4 + k.len() + self.dim * 4)
            .sum();
        let mut out = Vec::with_capacity(16 + payload);
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes).map_err(Error::StoreFormat)
    }

    fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != STORE_MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u32("count")? as usize;
        if dim == 0 {
            return Err(FormatError::Invalid("dim is zero".into()));
        }
        let mut store = EmbeddingStore::new(dim);
        for _ in 0..count {
            let len = r.u32("id length")? as usize;
            let id = std::str::from_utf8(r.take(len, "image id")?)
                .map_err(|_| FormatError::Invalid("image id is not UTF-8".into()))?
                .to_string();
            let raw = r.take(dim * 4, "vector")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let v = EmbeddingVector::from_unit(values)
                .map_err(|e| FormatError::Invalid(format!("{id}: {e}")))?;
            if store.entries.insert(id.clone(), v).is_some() {
                return Err(FormatError::Invalid(format!("duplicate id {id:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Invalid("trailing bytes".into()));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(FormatError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save_embedding_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_embedding_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}
