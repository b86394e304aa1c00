//! On-disk cache of prepared gallery features.
//!
//! Layout (little-endian): `"SMFC"`, u32 version, u64 gallery fingerprint,
//! u32 count, then per entry: u32 id length, id bytes, u32 offset x,
//! u32 offset y, u8 fallback, u8 too_small, u32 keypoint count, u32 dim,
//! keypoints as (x, y, response) f32 triples, descriptors as f32.

use std::path::Path;
use std::sync::Arc;

use super::GalleryEntry;
use crate::error::{Error, FormatError, Result};
use crate::features::{FeatureSet, Keypoint};

pub const CACHE_MAGIC: [u8; 4] = *b"SMFC";
const CACHE_VERSION: u32 = 1;

pub fn save_feature_cache(path: &Path, fingerprint: u64, entries: &[(String, Arc<GalleryEntry>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, e) in entries {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&e.offset.0.to_le_bytes());
        buf.extend_from_slice(&e.offset.1.to_le_bytes());
        buf.push(e.fallback as u8);
        buf.push(e.features.too_small as u8);
        buf.extend_from_slice(&(e.features.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(e.features.dim as u32).to_le_bytes());
        for k in &e.features.keypoints {
            for v in [k.x, k.y, k.response] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &e.features.descriptors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated("feature cache"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse(bytes: &[u8], fingerprint: u64) -> Result<Vec<(String, GalleryEntry)>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CACHE_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    if r.u64()? != fingerprint {
        return Err(FormatError::Invalid("cache was built with a different configuration".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Invalid("image id is not UTF-8".into()))?
            .to_string();
        let offset = (r.u32()?, r.u32()?);
        let fallback = r.u8()? != 0;
        let too_small = r.u8()? != 0;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut keypoints = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            keypoints.push(Keypoint {
                x: r.f32()?,
                y: r.f32()?,
                response: r.f32()?,
            });
        }
        let total = n.checked_mul(dim).ok_or(FormatError::Truncated("descriptor block"))?;
        let mut descriptors = Vec::with_capacity(total.min(1 << 20));
        for _ in 0..total {
            descriptors.push(r.f32()?);
        }
        out.push((
            id,
            GalleryEntry {
                features: FeatureSet {
                    keypoints,
                    descriptors,
                    dim,
                    too_small,
                },
                offset,
                fallback,
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Invalid("trailing bytes".into()));
    }
    Ok(out)
}

pub fn load_feature_cache(path: &Path, fingerprint: u64) -> Result<Vec<(String, GalleryEntry)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, fingerprint).map_err(Error::CacheFormat)
}
