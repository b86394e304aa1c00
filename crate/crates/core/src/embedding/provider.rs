use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};
use crate::raster::ImageInput;
use crate::remote::RemoteClient;

const HASH_COMPONENTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingBackend {
    /// Deterministic appearance embedder, no model required.
    Hash {
        #[serde(default = "default_thumb_side")]
        thumb_side: u32,
        #[serde(default = "default_hash_weight")]
        hash_weight: f32,
    },
    /// Precomputed vectors looked up by image id.
    Store { path: Option<std::path::PathBuf> },
    Remote,
}

fn default_thumb_side() -> u32 {
    16
}

fn default_hash_weight() -> f32 {
    0.25
}

impl Default for EmbeddingBackend {
    fn default() -> Self {
        EmbeddingBackend::Hash {
            thumb_side: default_thumb_side(),
            hash_weight: default_hash_weight(),
        }
    }
}

/// Grayscale thumbnail plus a few components derived from the pixel hash.
///
/// The thumbnail makes similar-looking images land close together, which is
/// what a semantic embedder does for related packaging; the hash part
/// separates byte-different images that happen to share a thumbnail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashEmbedder {
    pub thumb_side: u32,
    pub hash_weight: f32,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            thumb_side: default_thumb_side(),
            hash_weight: default_hash_weight(),
        }
    }
}

impl HashEmbedder {
    pub fn new(thumb_side: u32, hash_weight: f32) -> Result<Self> {
        if thumb_side == 0 || !hash_weight.is_finite() || hash_weight < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "hash embedder needs thumb_side > 0 and finite hash_weight >= 0, got {thumb_side}, {hash_weight}"
            )));
        }
        Ok(HashEmbedder {
            thumb_side,
            hash_weight,
        })
    }

    pub fn dim(&self) -> usize {
        (self.thumb_side * self.thumb_side) as usize + HASH_COMPONENTS
    }

    pub fn embed(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        let gray = imageops::grayscale(image);
        let thumb = imageops::resize(&gray, self.thumb_side, self.thumb_side, FilterType::Triangle);
        let mut values: Vec<f32> = thumb.pixels().map(|p| p.0[0] as f32 / 255.0).collect();

        let mut hasher = Sha256::new();
        hasher.update(image.width().to_le_bytes());
        hasher.update(image.height().to_le_bytes());
        hasher.update(image.as_raw());
        let digest = hasher.finalize();
        values.extend(
            digest[..HASH_COMPONENTS]
                .iter()
                .map(|&b| (b as f32 / 255.0 - 0.5) * self.hash_weight),
        );
        // An all-black thumbnail with zero hash weight has no direction.
        if values.iter().all(|&v| v == 0.0) {
            values[0] = 1.0;
        }
        EmbeddingVector::new(values)
    }
}

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Hash(HashEmbedder),
    Store(Arc<EmbeddingStore>),
    Remote(Arc<RemoteClient>),
}

impl EmbeddingProvider {
    /// `store` is required for the store backend unless the config names a
    /// path, in which case the file is loaded.
    pub fn from_config(
        cfg: &EmbeddingBackend,
        store: Option<&Arc<EmbeddingStore>>,
        remote: Option<&Arc<RemoteClient>>,
    ) -> Result<Self> {
        Ok(match cfg {
            EmbeddingBackend::Hash {
                thumb_side,
                hash_weight,
            } => EmbeddingProvider::Hash(HashEmbedder::new(*thumb_side, *hash_weight)?),
            EmbeddingBackend::Store { path: Some(p) } => {
                EmbeddingProvider::Store(Arc::new(super::load_embedding_store(p)?))
            }
            EmbeddingBackend::Store { path: None } => EmbeddingProvider::Store(
                store
                    .cloned()
                    .ok_or_else(|| Error::Config("store embedding backend without a store".into()))?,
            ),
            EmbeddingBackend::Remote => EmbeddingProvider::Remote(
                remote
                    .cloned()
                    .ok_or_else(|| Error::Config("remote embedder without endpoint".into()))?,
            ),
        })
    }

    /// Known output dimension, if fixed by configuration.
    pub fn dim(&self) -> Option<usize> {
        match self {
            EmbeddingProvider::Hash(h) => Some(h.dim()),
            EmbeddingProvider::Store(s) => Some(s.dim()),
            EmbeddingProvider::Remote(_) => None,
        }
    }

    pub fn embed(&self, input: ImageInput<'_>) -> Result<EmbeddingVector> {
        match self {
            EmbeddingProvider::Hash(h) => h.embed(input.image),
            EmbeddingProvider::Store(s) => s
                .get(input.id)
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding(input.id.to_string())),
            EmbeddingProvider::Remote(client) => client.embed(input.image),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn img() -> RgbImage {
        RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, 90]))
    }

    #[test]
    fn identical_images_identical_vectors() {
        let e = HashEmbedder::default();
        let a = e.embed(&img()).unwrap();
        assert_eq!(a, e.embed(&img()).unwrap());
        assert_eq!(a.dim(), 16 * 16 + 8);
        let n: f32 = a.as_slice().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-4);
    }

    #[test]
    fn one_pixel_changes_vector() {
        let e = HashEmbedder::default();
        let mut b = img();
        b.put_pixel(3, 3, Rgb([0, 0, 0]));
        assert_ne!(e.embed(&img()).unwrap(), e.embed(&b).unwrap());
    }

    #[test]
    fn store_backend_missing_id() {
        let p = EmbeddingProvider::Store(Arc::new(EmbeddingStore::new(4)));
        let image = img();
        assert!(matches!(
            p.embed(ImageInput::new("absent", &image)),
            Err(Error::MissingEmbedding(id)) if id == "absent"
        ));
    }

    #[test]
    fn black_image_still_embeds() {
        let e = HashEmbedder::new(4, 0.0).unwrap();
        let black = RgbImage::new(8, 8);
        assert!(e.embed(&black).is_ok());
    }
}
