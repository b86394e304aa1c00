//! Stage 1 → Stage 2 → Stage 3 orchestration and ranking.

mod cache;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{load_feature_cache, save_feature_cache, CACHE_MAGIC};

use crate::catalog::{CatalogManifest, CoarseClass, ViewLabel};
use crate::embedding::{
    class_filter_candidates, top_k_images, top_k_products, CandidateSet, CandidateUnit, EmbeddingBackend,
    EmbeddingProvider, EmbeddingStore,
};
use crate::error::{Error, Result, Stage};
use crate::features::{FeatureConfig, FeatureProvider, FeatureSet};
use crate::matching::{inlier_count, pair_seed, ransac_verify, MatchSet, MatcherConfig, MatcherProvider, RansacParams};
use crate::raster::{load_rgb, ImageInput};
use crate::remote::{EndpointConfig, RemoteClient};
use crate::segmentation::{prepare_region_with_margin, PreparedRegion, SegmenterConfig, SegmenterProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStrategy {
    #[default]
    EmbeddingTopk,
    ClassFilter,
    /// Every product is verified; K is ignored.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub candidate_strategy: CandidateStrategy,
    pub candidate_unit: CandidateUnit,
    pub segmentation_enabled: bool,
    pub embedder: EmbeddingBackend,
    pub segmenter: SegmenterConfig,
    pub features: FeatureConfig,
    pub matcher: MatcherConfig,
    pub ransac: RansacParams,
    pub max_keypoints: usize,
    /// Extra off-mask border kept around segmentation crops.
    pub crop_margin: u32,
    /// 0 means one worker per available core.
    pub worker_count: usize,
    /// Mixed into every per-pair RANSAC seed.
    pub seed: u64,
    pub endpoint: Option<EndpointConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 35,
            candidate_strategy: CandidateStrategy::EmbeddingTopk,
            candidate_unit: CandidateUnit::Product,
            segmentation_enabled: true,
            embedder: EmbeddingBackend::default(),
            segmenter: SegmenterConfig::default(),
            features: FeatureConfig::default(),
            matcher: MatcherConfig::default(),
            ransac: RansacParams::default(),
            max_keypoints: 256,
            crop_margin: 8,
            worker_count: 0,
            seed: 0,
            endpoint: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_keypoints == 0 {
            return Err(Error::Config("max_keypoints must be at least 1".into()));
        }
        self.ransac.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn uses_remote(&self) -> bool {
        matches!(self.embedder, EmbeddingBackend::Remote)
            || matches!(self.segmenter, SegmenterConfig::Remote)
            || matches!(self.features, FeatureConfig::Remote)
            || matches!(self.matcher, MatcherConfig::Remote)
    }

    /// Short stable digest of the whole configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex8(&Sha256::digest(&json))
    }

    /// Digest of everything gallery-side preparation depends on.
    pub fn gallery_fingerprint(&self) -> u64 {
        let key = (
            self.segmentation_enabled,
            &self.segmenter,
            &self.features,
            self.max_keypoints,
            self.crop_margin,
        );
        let digest = Sha256::digest(serde_json::to_vec(&key).expect("config serializes"));
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn ransac_seed(&self, query_id: &str, image_id: &str) -> u64 {
        pair_seed(query_id, image_id) ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

fn hex8(bytes: &[u8]) -> String {
    bytes[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// A query ready to run.
#[derive(Debug, Clone)]
pub struct QueryImage {
    pub id: String,
    pub image: image::RgbImage,
    pub mask_ref: Option<PathBuf>,
    /// Coarse class, needed only by the class-filter strategy.
    pub class: Option<CoarseClass>,
}

/// A query still on disk; loading happens inside the batch so a bad file
/// fails only its own query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub class: Option<CoarseClass>,
}

impl QuerySpec {
    pub fn load(&self) -> Result<QueryImage> {
        Ok(QueryImage {
            id: self.id.clone(),
            image: load_rgb(&self.image_path)?,
            mask_ref: self.mask_path.clone(),
            class: self.class,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub product_id: String,
    pub inlier_score: usize,
    pub stage1_score: f32,
    pub best_view: ViewLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub image_id: String,
    pub matches: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum TraceDetail {
    Stage1 { candidates: usize, views: usize },
    Stage2 { query_fallback: bool, gallery_fallbacks: usize },
    Stage3 { query_keypoints: usize, pairs: usize, per_view: Vec<ViewScore> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub wall_time_ms: f64,
    pub detail: TraceDetail,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stage1: f64,
    pub stage2: f64,
    pub stage3: f64,
    pub total: f64,
}

pub const FLAG_QUERY_FALLBACK: &str = "query_segmentation_fallback";
pub const FLAG_GALLERY_FALLBACK: &str = "gallery_segmentation_fallback";
pub const FLAG_QUERY_TOO_SMALL: &str = "query_too_small";
pub const FLAG_NO_QUERY_FEATURES: &str = "no_query_features";

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<RankedEntry>,
    /// Stage-1 output, in Stage-1 order.
    pub candidates: CandidateSet,
    pub traces: Vec<StageTrace>,
    pub flags: BTreeSet<String>,
    pub timings: Timings,
    /// Gallery preparation done on behalf of this query; not part of
    /// `timings`.
    pub gallery_prep_ms: f64,
}

/// Wire form of one result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultExport {
    pub query_id: String,
    pub ranked: Vec<RankedEntry>,
    /// Absent when timings are left out for byte-stable output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<Timings>,
    pub flags: Vec<String>,
}

impl RetrievalResult {
    pub fn export(&self) -> ResultExport {
        ResultExport {
            query_id: self.query_id.clone(),
            ranked: self.ranked.clone(),
            timings_ms: Some(self.timings),
            flags: self.flags.iter().cloned().collect(),
        }
    }

    /// Products in Stage-1 order.
    pub fn stage1_ranking(&self) -> Vec<&str> {
        self.candidates.product_ids().collect()
    }
}

/// Inlier count descending, then Stage-1 score descending, then product id.
pub fn ranking_order(a: (&str, usize, f32), b: (&str, usize, f32)) -> Ordering {
    b.1.cmp(&a.1)
        .then_with(|| b.2.total_cmp(&a.2))
        .then_with(|| a.0.cmp(b.0))
}

/// Sorts `(product_id, inlier_score, stage1_score)` triples into result order.
pub fn rank_candidates(mut scores: Vec<(String, usize, f32)>) -> Vec<(String, usize, f32)> {
    scores.sort_by(|a, b| ranking_order((&a.0, a.1, a.2), (&b.0, b.1, b.2)));
    scores
}

/// Prepared gallery view: features in crop coordinates plus the crop origin.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub features: FeatureSet,
    pub offset: (u32, u32),
    pub fallback: bool,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

pub struct Engine {
    config: PipelineConfig,
    catalog: Arc<CatalogManifest>,
    store: Arc<EmbeddingStore>,
    embedder: EmbeddingProvider,
    segmenter: SegmenterProvider,
    features: FeatureProvider,
    matcher: MatcherProvider,
    pool: rayon::ThreadPool,
    gallery: RwLock<HashMap<String, Arc<GalleryEntry>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("products", &self.catalog.len())
            .finish_non_exhaustive()
    }
}

pub fn build_pool(worker_count: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Embeds every gallery image.
pub fn build_store(catalog: &CatalogManifest, embedder: &EmbeddingProvider) -> Result<EmbeddingStore> {
    let images = catalog.gallery_images();
    let vectors = images
        .par_iter()
        .map(|(_, v)| {
            let img = load_rgb(&v.image_ref)?;
            embedder
                .embed(ImageInput::new(&v.image_id, &img))
                .map_err(|e| e.at_stage(Stage::Stage1))
        })
        .collect::<Vec<_>>();
    let mut store: Option<EmbeddingStore> = None;
    for ((_, v), e) in images.iter().zip(vectors) {
        let e = e?;
        let s = store.get_or_insert_with(|| EmbeddingStore::new(e.dim()));
        s.insert(v.image_id.clone(), e)?;
    }
    store.ok_or(Error::EmptyCatalog)
}

impl Engine {
    /// Without a `store`, gallery embeddings are computed with the
    /// configured embedder (or loaded, for the store backend).
    pub fn new(config: PipelineConfig, catalog: Arc<CatalogManifest>, store: Option<Arc<EmbeddingStore>>) -> Result<Self> {
        config.validate()?;
        if catalog.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let remote = if config.uses_remote() {
            let ep = config.endpoint.clone().unwrap_or_default().with_env_fallback();
            Some(Arc::new(RemoteClient::new(ep)?))
        } else {
            None
        };
        let embedder = EmbeddingProvider::from_config(&config.embedder, store.as_ref(), remote.as_ref())?;
        let segmenter = SegmenterProvider::from_config(&config.segmenter, remote.as_ref())?;
        let features = FeatureProvider::from_config(&config.features, remote.as_ref())?;
        let matcher = MatcherProvider::from_config(&config.matcher, remote.as_ref())?;
        let pool = build_pool(config.worker_count)?;

        let store = match (store, &embedder) {
            (Some(s), _) => s,
            (None, EmbeddingProvider::Store(s)) => s.clone(),
            (None, e) => Arc::new(pool.install(|| build_store(&catalog, e))?),
        };
        for (_, v) in catalog.gallery_images() {
            if store.get(&v.image_id).is_none() {
                return Err(Error::MissingEmbedding(v.image_id.clone()));
            }
        }
        if let Some(d) = embedder.dim() {
            if d != store.dim() {
                return Err(Error::DimMismatch {
                    expected: store.dim(),
                    got: d,
                });
            }
        }
        Ok(Engine {
            config,
            catalog,
            store,
            embedder,
            segmenter,
            features,
            matcher,
            pool,
            gallery: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &CatalogManifest {
        &self.catalog
    }

    pub fn store(&self) -> &Arc<EmbeddingStore> {
        &self.store
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn region(&self, input: ImageInput<'_>) -> Result<PreparedRegion> {
        if self.config.segmentation_enabled {
            prepare_region_with_margin(&self.segmenter, input, self.config.crop_margin).map_err(|e| e.at_stage(Stage::Stage2))
        } else {
            Ok(PreparedRegion::unmasked(input.image.clone()))
        }
    }

    fn extract(&self, region: &PreparedRegion) -> Result<FeatureSet> {
        self.features
            .extract(&region.image, region.mask.as_ref(), self.config.max_keypoints)
            .map_err(|e| e.at_stage(Stage::Stage3))
    }

    fn prepare_gallery_view(&self, image_id: &str) -> Result<GalleryEntry> {
        let (_, view) = self
            .catalog
            .view(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let img = load_rgb(&view.image_ref)?;
        let region = self.region(ImageInput::new(image_id, &img).with_mask(view.mask_ref.as_deref()))?;
        Ok(GalleryEntry {
            features: self.extract(&region)?,
            offset: region.offset,
            fallback: region.fallback,
        })
    }

    /// Prepares (and caches) the given gallery views.
    fn ensure_gallery(&self, image_ids: &[&str]) -> Result<()> {
        let missing: Vec<&str> = {
            let cache = self.gallery.read().unwrap_or_else(|e| e.into_inner());
            image_ids.iter().copied().filter(|id| !cache.contains_key(*id)).collect()
        };
        if missing.is_empty() {
            return Ok(());
        }
        let prepared: Vec<Result<GalleryEntry>> = missing.par_iter().map(|id| self.prepare_gallery_view(id)).collect();
        let mut cache = self.gallery.write().unwrap_or_else(|e| e.into_inner());
        for (id, entry) in missing.into_iter().zip(prepared) {
            cache.entry(id.to_string()).or_insert(Arc::new(entry?));
        }
        Ok(())
    }

    /// Prepares every gallery view of the catalog.
    pub fn prepare_all(&self) -> Result<()> {
        let images = self.catalog.gallery_images();
        let ids: Vec<&str> = images.iter().map(|(_, v)| v.image_id.as_str()).collect();
        self.pool.install(|| self.ensure_gallery(&ids))
    }

    pub fn gallery_entry(&self, image_id: &str) -> Result<Arc<GalleryEntry>> {
        self.pool.install(|| self.ensure_gallery(&[image_id]))?;
        let cache = self.gallery.read().unwrap_or_else(|e| e.into_inner());
        Ok(cache[image_id].clone())
    }

    /// Snapshot of prepared gallery entries, sorted by image id.
    pub fn gallery_snapshot(&self) -> Vec<(String, Arc<GalleryEntry>)> {
        let cache = self.gallery.read().unwrap_or_else(|e| e.into_inner());
        let mut out: Vec<_> = cache.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Seeds the gallery cache; entries for unknown image ids are rejected.
    pub fn preload_gallery(&self, entries: Vec<(String, GalleryEntry)>) -> Result<()> {
        let mut cache = self.gallery.write().unwrap_or_else(|e| e.into_inner());
        for (id, entry) in entries {
            if self.catalog.view(&id).is_none() {
                return Err(Error::UnknownImage(id));
            }
            cache.insert(id, Arc::new(entry));
        }
        Ok(())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        save_feature_cache(path, self.config.gallery_fingerprint(), &self.gallery_snapshot())
    }

    pub fn load_cache(&self, path: &Path) -> Result<()> {
        self.preload_gallery(load_feature_cache(path, self.config.gallery_fingerprint())?)
    }

    fn stage1(&self, q: &QueryImage) -> Result<CandidateSet> {
        let cfg = &self.config;
        match cfg.candidate_strategy {
            CandidateStrategy::ClassFilter => {
                let class = q
                    .class
                    .ok_or_else(|| Error::Config(format!("class filter needs a class for query {:?}", q.id)))?;
                class_filter_candidates(class, &self.catalog)
            }
            strategy => {
                let v = self
                    .embedder
                    .embed(ImageInput::new(&q.id, &q.image))
                    .map_err(|e| e.at_stage(Stage::Stage1))?;
                match (strategy, cfg.candidate_unit) {
                    (CandidateStrategy::None, _) => top_k_products(&v, &self.catalog, &self.store, self.catalog.len()),
                    (_, CandidateUnit::Product) => top_k_products(&v, &self.catalog, &self.store, cfg.k),
                    (_, CandidateUnit::Image) => top_k_images(&v, &self.catalog, &self.store, cfg.k),
                }
            }
        }
    }

    pub fn run_query(&self, q: &QueryImage) -> Result<RetrievalResult> {
        self.pool.install(|| self.run_query_inner(q))
    }

    fn run_query_inner(&self, q: &QueryImage) -> Result<RetrievalResult> {
        let start = Instant::now();
        let mut flags = BTreeSet::new();

        let t = Instant::now();
        let candidates = self.stage1(q)?;
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let stage1_ms = ms_since(t);
        let stage1_trace = StageTrace {
            stage: Stage::Stage1,
            wall_time_ms: stage1_ms,
            detail: TraceDetail::Stage1 {
                candidates: candidates.len(),
                views: candidates.image_count(),
            },
        };

        let t = Instant::now();
        let pairs: Vec<(usize, &str)> = candidates
            .entries
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| c.view_ids.iter().map(move |v| (ci, v.as_str())))
            .collect();
        let view_ids: Vec<&str> = pairs.iter().map(|p| p.1).collect();
        self.ensure_gallery(&view_ids)?;
        let gallery_prep_ms = ms_since(t);
        let gallery: Vec<Arc<GalleryEntry>> = {
            let cache = self.gallery.read().unwrap_or_else(|e| e.into_inner());
            view_ids.iter().map(|id| cache[*id].clone()).collect()
        };

        let t = Instant::now();
        let region = self.region(ImageInput::new(&q.id, &q.image).with_mask(q.mask_ref.as_deref()))?;
        if region.fallback {
            flags.insert(FLAG_QUERY_FALLBACK.to_string());
        }
        let gallery_fallbacks = gallery.iter().filter(|g| g.fallback).count();
        if gallery_fallbacks > 0 {
            flags.insert(FLAG_GALLERY_FALLBACK.to_string());
        }
        let stage2_ms = ms_since(t);
        let stage2_trace = StageTrace {
            stage: Stage::Stage2,
            wall_time_ms: stage2_ms,
            detail: TraceDetail::Stage2 {
                query_fallback: region.fallback,
                gallery_fallbacks,
            },
        };

        let t = Instant::now();
        let qf = self.extract(&region)?;
        if qf.too_small {
            flags.insert(FLAG_QUERY_TOO_SMALL.to_string());
        }
        if qf.is_empty() {
            flags.insert(FLAG_NO_QUERY_FEATURES.to_string());
        }
        let verified: Vec<Result<(usize, usize)>> = pairs
            .par_iter()
            .zip(gallery.par_iter())
            .map(|(&(_, image_id), g)| {
                let m = self.verify(&q.id, image_id, &qf, &g.features)?;
                Ok((m.len(), inlier_count(&m)))
            })
            .collect();
        let verified = verified.into_iter().collect::<Result<Vec<_>>>()?;

        let mut best: Vec<Option<(usize, ViewLabel)>> = vec![None; candidates.len()];
        let mut per_view = Vec::with_capacity(pairs.len());
        for (&(ci, image_id), &(matches, inliers)) in pairs.iter().zip(&verified) {
            let (_, view) = self.catalog.view(image_id).expect("candidate view in catalog");
            // Views arrive in label order, so strict > keeps the first maximum.
            if best[ci].is_none_or(|(b, _)| inliers > b) {
                best[ci] = Some((inliers, view.view));
            }
            per_view.push(ViewScore {
                image_id: image_id.to_string(),
                matches,
                inliers,
            });
        }
        let mut ranked: Vec<RankedEntry> = candidates
            .entries
            .iter()
            .zip(best)
            .map(|(c, b)| {
                let (inlier_score, best_view) = b.expect("every candidate has a view");
                RankedEntry {
                    product_id: c.product_id.clone(),
                    inlier_score,
                    stage1_score: c.score,
                    best_view,
                }
            })
            .collect();
        ranked.sort_by(|a, b| {
            ranking_order(
                (&a.product_id, a.inlier_score, a.stage1_score),
                (&b.product_id, b.inlier_score, b.stage1_score),
            )
        });
        let stage3_ms = ms_since(t);
        let stage3_trace = StageTrace {
            stage: Stage::Stage3,
            wall_time_ms: stage3_ms,
            detail: TraceDetail::Stage3 {
                query_keypoints: qf.len(),
                pairs: pairs.len(),
                per_view,
            },
        };

        Ok(RetrievalResult {
            query_id: q.id.clone(),
            ranked,
            candidates,
            traces: vec![stage1_trace, stage2_trace, stage3_trace],
            flags,
            timings: Timings {
                stage1: stage1_ms,
                stage2: stage2_ms,
                stage3: stage3_ms,
                total: (ms_since(start) - gallery_prep_ms).max(0.0),
            },
            gallery_prep_ms,
        })
    }

    /// Descriptor matching plus local geometric verification of one pair.
    pub fn verify(&self, query_id: &str, image_id: &str, qf: &FeatureSet, gf: &FeatureSet) -> Result<MatchSet> {
        let m = self
            .matcher
            .match_descriptors(qf, gf)
            .map_err(|e| e.at_stage(Stage::Stage3))?;
        ransac_verify(&m, qf, gf, &self.config.ransac, self.config.ransac_seed(query_id, image_id))
    }

    /// Raw (unverified) descriptor matches.
    pub fn raw_matches(&self, qf: &FeatureSet, gf: &FeatureSet) -> Result<MatchSet> {
        self.matcher
            .match_descriptors(qf, gf)
            .map_err(|e| e.at_stage(Stage::Stage3))
    }

    /// Query features as Stage 3 sees them, with keypoints moved back to
    /// source-image coordinates.
    pub fn query_features_in_source(&self, q: &QueryImage) -> Result<FeatureSet> {
        self.pool.install(|| {
            let region = self.region(ImageInput::new(&q.id, &q.image).with_mask(q.mask_ref.as_deref()))?;
            Ok(self
                .extract(&region)?
                .translated(region.offset.0 as f32, region.offset.1 as f32))
        })
    }

    /// Gallery features with keypoints in source-image coordinates.
    pub fn gallery_features_in_source(&self, image_id: &str) -> Result<FeatureSet> {
        let g = self.gallery_entry(image_id)?;
        Ok(g.features.clone().translated(g.offset.0 as f32, g.offset.1 as f32))
    }

    /// Runs every query; failures stay attached to their query.
    pub fn run_batch(&self, queries: &[QuerySpec]) -> Vec<(String, Result<RetrievalResult>)> {
        self.pool.install(|| {
            queries
                .par_iter()
                .map(|spec| (spec.id.clone(), spec.load().and_then(|q| self.run_query_inner(&q))))
                .collect()
        })
    }
}

/// Writes one JSON object per line. Without timings, identical runs give
/// identical bytes.
pub fn write_results_jsonl(results: &[RetrievalResult], path: &Path, with_timings: bool) -> Result<()> {
    let mut out = String::new();
    for r in results {
        let mut e = r.export();
        if !with_timings {
            e.timings_ms = None;
        }
        out.push_str(&serde_json::to_string(&e)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: Vec<(String, usize, f32)>) -> Vec<String> {
        v.into_iter().map(|t| t.0).collect()
    }

    #[test]
    fn rank_by_inliers_then_score_then_id() {
        let r = rank_candidates(vec![("A".into(), 206, 0.9), ("B".into(), 494, 0.8)]);
        assert_eq!(ids(r), ["B", "A"]);
        let r = rank_candidates(vec![("A".into(), 10, 0.5), ("B".into(), 10, 0.7)]);
        assert_eq!(ids(r), ["B", "A"]);
        let r = rank_candidates(vec![("B".into(), 10, 0.5), ("A".into(), 10, 0.5)]);
        assert_eq!(ids(r), ["A", "B"]);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = PipelineConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 3}"#).is_err());
        let partial: PipelineConfig = serde_json::from_str(r#"{"k": 5, "candidate_strategy": "none"}"#).unwrap();
        assert_eq!(partial.k, 5);
        assert_eq!(partial.candidate_strategy, CandidateStrategy::None);
        assert!(PipelineConfig { k: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn gallery_fingerprint_ignores_stage1_settings() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            k: 3,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(a.gallery_fingerprint(), b.gallery_fingerprint());
        let c = PipelineConfig {
            max_keypoints: 7,
            ..Default::default()
        };
        assert_ne!(a.gallery_fingerprint(), c.gallery_fingerprint());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// The order is total: sorting is insensitive to input order and
        /// consistent with the comparison on every adjacent pair.
        #[test]
        fn ranking_is_a_total_order(
            raw in proptest::collection::vec((0u8..6, 0usize..4, 0u8..4), 0..12),
            shuffle_seed in any::<u64>(),
        ) {
            let mut seen = std::collections::HashSet::new();
            let scores: Vec<(String, usize, f32)> = raw
                .into_iter()
                .filter(|t| seen.insert(t.0))
                .map(|(id, n, s)| (format!("p{id}"), n, s as f32 / 4.0))
                .collect();
            let a = rank_candidates(scores.clone());
            let mut shuffled = scores;
            let len = shuffled.len();
            if len > 1 {
                let mut s = shuffle_seed;
                for i in (1..len).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
            }
            let b = rank_candidates(shuffled);
            prop_assert_eq!(&a, &b);
            for w in a.windows(2) {
                prop_assert_eq!(
                    ranking_order((&w[0].0, w[0].1, w[0].2), (&w[1].0, w[1].1, w[1].2)),
                    Ordering::Less
                );
            }
        }
    }
}
