//! Stage 1: global embeddings and candidate pruning.
//!
//! Vectors are normalized at construction, so cosine similarity is a plain
//! dot product. Candidate selection works at product granularity by default:
//! a product scores the maximum similarity over its views and every view of
//! a selected product is passed on to verification.

mod provider;
mod store;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use provider::{EmbeddingBackend, EmbeddingProvider, HashEmbedder};
pub use store::{load_embedding_store, save_embedding_store, EmbeddingStore, STORE_MAGIC};

use crate::catalog::{CatalogManifest, CoarseClass, ProductRecord};
use crate::error::{Error, Result};

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit L2 norm.
    pub fn new(mut values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidVector("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVector("non-finite component".into()));
        }
        let norm = values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidVector("zero norm".into()));
        }
        for v in &mut values {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(EmbeddingVector { values })
    }

    /// Wraps values that are already unit norm without touching their bits.
    pub(crate) fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVector("empty or non-finite vector".into()));
        }
        let norm = values.iter().map(|&v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidVector(format!("norm {norm} is not 1")));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    // f64 accumulation keeps self-similarity within rounding of 1.
    let dot: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot as f32).clamp(-1.0, 1.0))
}

/// Maximum view similarity of one product.
pub fn product_similarity(
    query: &EmbeddingVector,
    product: &ProductRecord,
    store: &EmbeddingStore,
) -> Result<f32> {
    let mut best = f32::NEG_INFINITY;
    for v in &product.views {
        let e = store
            .get(&v.image_id)
            .ok_or_else(|| Error::MissingEmbedding(v.image_id.clone()))?;
        best = best.max(cosine_similarity(query, e)?);
    }
    Ok(best)
}

/// Whether Stage 1 keeps the top K products or the top K gallery images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateUnit {
    #[default]
    Product,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub product_id: String,
    pub score: f32,
    /// Gallery images of this product that proceed to verification.
    pub view_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub k: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn product_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.product_id.as_str())
    }

    pub fn image_count(&self) -> usize {
        self.entries.iter().map(|c| c.view_ids.len()).sum()
    }
}

/// Descending score, ascending product id.
pub(crate) fn score_order(a: (&str, f32), b: (&str, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// The `min(k, N)` most similar products.
pub fn top_k_products(
    query: &EmbeddingVector,
    catalog: &CatalogManifest,
    store: &EmbeddingStore,
    k: usize,
) -> Result<CandidateSet> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let mut scored = catalog
        .products
        .iter()
        .map(|p| Ok((p, product_similarity(query, p, store)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| score_order((&a.0.product_id, a.1), (&b.0.product_id, b.1)));
    scored.truncate(k);
    Ok(CandidateSet {
        entries: scored
            .into_iter()
            .map(|(p, score)| Candidate {
                product_id: p.product_id.clone(),
                score,
                view_ids: p.views.iter().map(|v| v.image_id.clone()).collect(),
            })
            .collect(),
        k,
    })
}

/// The `min(k, N×6)` most similar gallery images, grouped by product. Each
/// product keeps only its selected views and scores its best one.
pub fn top_k_images(
    query: &EmbeddingVector,
    catalog: &CatalogManifest,
    store: &EmbeddingStore,
    k: usize,
) -> Result<CandidateSet> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    let mut scored = Vec::with_capacity(catalog.image_count());
    for (idx, (pid, view)) in catalog.gallery_images().into_iter().enumerate() {
        let e = store
            .get(&view.image_id)
            .ok_or_else(|| Error::MissingEmbedding(view.image_id.clone()))?;
        scored.push((idx, pid, view.image_id.as_str(), cosine_similarity(query, e)?));
    }
    scored.sort_by(|a, b| score_order((a.1, a.3), (b.1, b.3)).then(a.0.cmp(&b.0)));
    scored.truncate(k);

    let mut entries: Vec<Candidate> = Vec::new();
    for (_, pid, image_id, score) in scored {
        match entries.iter_mut().find(|c| c.product_id == pid) {
            Some(c) => c.view_ids.push(image_id.to_string()),
            None => entries.push(Candidate {
                product_id: pid.to_string(),
                score,
                view_ids: vec![image_id.to_string()],
            }),
        }
    }
    // Keep each product's views in gallery order.
    for c in &mut entries {
        let product = catalog.product(&c.product_id).expect("id from catalog");
        c.view_ids.sort_by_key(|id| {
            product
                .views
                .iter()
                .position(|v| &v.image_id == id)
                .unwrap_or(usize::MAX)
        });
    }
    Ok(CandidateSet { entries, k })
}

/// Replaces embedding ranking with a coarse-class restriction: every product
/// of the class, unscored, in product-id order.
pub fn class_filter_candidates(
    query_class: CoarseClass,
    catalog: &CatalogManifest,
) -> Result<CandidateSet> {
    if query_class == CoarseClass::Unknown {
        return Err(Error::InvalidParameter(
            "class filter needs a known query class".into(),
        ));
    }
    let mut entries: Vec<Candidate> = catalog
        .products
        .iter()
        .filter(|p| p.coarse_class == query_class)
        .map(|p| Candidate {
            product_id: p.product_id.clone(),
            score: 0.0,
            view_ids: p.views.iter().map(|v| v.image_id.clone()).collect(),
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyClass(query_class));
    }
    entries.sort_by(|a, b| a.product_id.cmp(&b.product_id));
    let k = entries.len();
    Ok(CandidateSet { entries, k })
}
