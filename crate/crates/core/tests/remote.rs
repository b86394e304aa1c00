//! Remote providers against an in-process mock server.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use shelfmatch_core::embedding::{EmbeddingBackend, EmbeddingStore, HashEmbedder};
use shelfmatch_core::error::RemoteError;
use shelfmatch_core::features::{extract_reference, FeatureConfig, FeatureSet, HarrisConfig, Keypoint};
use shelfmatch_core::matching::{match_nearest, MatcherConfig, DEFAULT_RATIO};
use shelfmatch_core::pipeline::{Engine, PipelineConfig, QuerySpec};
use shelfmatch_core::raster::{decode_rgb, Mask};
use shelfmatch_core::remote::{encode_rle, EndpointConfig, RemoteClient, WireDetection, WireFeatures, WireMatchRequest, WireMatches};
use shelfmatch_core::segmentation::SegmenterConfig;
use shelfmatch_core::synthesis::{generate_dataset, SynthSpec};
use shelfmatch_core::Error;

async fn embed(body: Bytes) -> Json<Vec<f32>> {
    let img = decode_rgb(&body, "upload").unwrap();
    Json(HashEmbedder::default().embed(&img).unwrap().as_slice().to_vec())
}

fn full_detection(w: u32, h: u32, rows: u32) -> WireDetection {
    WireDetection {
        bbox: [0, 0, w, h],
        label: "product".into(),
        score: 0.9,
        mask_rle: encode_rle(&Mask::full(w, rows)),
    }
}

async fn segment(body: Bytes) -> Json<Vec<WireDetection>> {
    let img = decode_rgb(&body, "upload").unwrap();
    Json(vec![full_detection(img.width(), img.height(), img.height())])
}

/// Mask with one row too many.
async fn segment_bad_dims(body: Bytes) -> Json<Vec<WireDetection>> {
    let img = decode_rgb(&body, "upload").unwrap();
    Json(vec![full_detection(img.width(), img.height(), img.height() + 1)])
}

async fn features(body: Bytes) -> Json<WireFeatures> {
    let img = decode_rgb(&body, "upload").unwrap();
    let fs = extract_reference(&img, None, usize::MAX, &HarrisConfig::default());
    Json(WireFeatures {
        keypoints: fs.keypoints.iter().map(|k| [k.x, k.y]).collect(),
        descriptors: (0..fs.len()).map(|i| fs.descriptor(i).to_vec()).collect(),
    })
}

fn feature_set(kpts: &[[f32; 2]], rows: &[Vec<f32>]) -> FeatureSet {
    let kps = kpts.iter().map(|&[x, y]| Keypoint { x, y, response: 1.0 }).collect();
    FeatureSet::from_rows(kps, rows).unwrap()
}

async fn matches(Json(req): Json<WireMatchRequest>) -> Json<WireMatches> {
    let a = feature_set(&req.kpts_a, &req.desc_a);
    let b = feature_set(&req.kpts_b, &req.desc_b);
    let m = match_nearest(&a, &b, DEFAULT_RATIO, true);
    Json(WireMatches {
        matches: m.correspondences.iter().map(|c| [c.query_idx, c.gallery_idx]).collect(),
    })
}

async fn slow(_body: Bytes) -> StatusCode {
    tokio::time::sleep(Duration::from_millis(400)).await;
    StatusCode::OK
}

async fn not_found(_body: Bytes) -> StatusCode {
    StatusCode::NOT_FOUND
}

fn start_server() -> SocketAddr {
    let app = Router::new()
        .route("/ok/embed", post(embed))
        .route("/ok/segment", post(segment))
        .route("/ok/features", post(features))
        .route("/ok/match", post(matches))
        .route("/bad/segment", post(segment_bad_dims))
        .route("/slow/embed", post(slow))
        .route("/missing/embed", post(not_found));
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn server() -> SocketAddr {
    static ADDR: std::sync::OnceLock<SocketAddr> = std::sync::OnceLock::new();
    *ADDR.get_or_init(start_server)
}

fn endpoint(path: &str) -> EndpointConfig {
    EndpointConfig {
        backoff_ms: 5,
        ..EndpointConfig::new(format!("http://{}/{path}", server()))
    }
}

fn small_dataset(dir: &std::path::Path) -> shelfmatch_core::synthesis::SynthDataset {
    let spec = SynthSpec {
        n_products: 8,
        similarity_groups: 4,
        seed: 11,
        ..Default::default()
    };
    generate_dataset(&spec, dir).unwrap()
}

fn query_specs(ds: &shelfmatch_core::synthesis::SynthDataset) -> Vec<QuerySpec> {
    ds.records
        .iter()
        .map(|r| QuerySpec {
            id: r.query_id.clone(),
            image_path: r.image_path.clone(),
            mask_path: None,
            class: None,
        })
        .collect()
}

fn rankings(engine: &Engine, specs: &[QuerySpec]) -> Vec<(String, Vec<(String, usize)>)> {
    engine
        .run_batch(specs)
        .into_iter()
        .map(|(id, r)| {
            let r = r.unwrap();
            (id, r.ranked.iter().map(|e| (e.product_id.clone(), e.inlier_score)).collect())
        })
        .collect()
}

#[test]
fn remote_stack_matches_local_stack() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let catalog = Arc::new(ds.catalog.clone());
    let specs = query_specs(&ds);

    let local = PipelineConfig {
        k: 5,
        worker_count: 2,
        ..Default::default()
    };
    let remote = PipelineConfig {
        embedder: EmbeddingBackend::Remote,
        segmenter: SegmenterConfig::Remote,
        features: FeatureConfig::Remote,
        matcher: MatcherConfig::Remote,
        endpoint: Some(endpoint("ok")),
        ..local.clone()
    };
    let a = rankings(&Engine::new(local, catalog.clone(), None).unwrap(), &specs);
    let b = rankings(&Engine::new(remote, catalog, None).unwrap(), &specs);
    assert_eq!(a, b);
    assert!(a.iter().any(|(_, r)| r[0].1 > 0));
}

#[test]
fn remote_embedder_matches_store_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let catalog = Arc::new(ds.catalog.clone());
    let specs = query_specs(&ds);

    // Fixture vectors for every gallery image and query, keyed by id.
    let hash = HashEmbedder::default();
    let mut store = EmbeddingStore::new(hash.dim());
    for (_, v) in catalog.gallery_images() {
        let img = shelfmatch_core::raster::load_rgb(&v.image_ref).unwrap();
        store.insert(v.image_id.clone(), hash.embed(&img).unwrap()).unwrap();
    }
    for s in &specs {
        let img = shelfmatch_core::raster::load_rgb(&s.image_path).unwrap();
        store.insert(s.id.clone(), hash.embed(&img).unwrap()).unwrap();
    }
    let store = Arc::new(store);

    let base = PipelineConfig {
        k: 3,
        worker_count: 1,
        ..Default::default()
    };
    let stored = PipelineConfig {
        embedder: EmbeddingBackend::Store { path: None },
        ..base.clone()
    };
    let remote = PipelineConfig {
        embedder: EmbeddingBackend::Remote,
        endpoint: Some(endpoint("ok")),
        ..base
    };
    let a = Engine::new(stored, catalog.clone(), Some(store.clone())).unwrap();
    let b = Engine::new(remote, catalog, Some(store)).unwrap();
    for (x, y) in a.run_batch(&specs).into_iter().zip(b.run_batch(&specs)) {
        let (x, y) = (x.1.unwrap(), y.1.unwrap());
        assert_eq!(x.candidates, y.candidates);
        assert_eq!(x.ranked, y.ranked);
    }
}

#[test]
fn mask_with_wrong_dims_is_a_schema_error() {
    let client = RemoteClient::new(endpoint("bad")).unwrap();
    let img = image::RgbImage::from_pixel(20, 12, image::Rgb([9, 9, 9]));
    let err = client.segment(&img).unwrap_err();
    assert!(matches!(err, Error::Remote(RemoteError::Schema(_))), "{err:?}");
}

#[test]
fn slow_server_times_out_after_retries() {
    let cfg = EndpointConfig {
        timeout_ms: 100,
        retries: 2,
        ..endpoint("slow")
    };
    let client = RemoteClient::new(cfg).unwrap();
    let img = image::RgbImage::new(8, 8);
    let t = std::time::Instant::now();
    let err = client.embed(&img).unwrap_err();
    assert!(matches!(err, Error::Remote(RemoteError::Timeout { attempts: 3 })), "{err:?}");
    // Three attempts of ~100 ms each.
    assert!(t.elapsed() >= Duration::from_millis(300));
}

#[test]
fn client_errors_are_not_retried() {
    let client = RemoteClient::new(endpoint("missing")).unwrap();
    let err = client.embed(&image::RgbImage::new(4, 4)).unwrap_err();
    assert!(matches!(err, Error::Remote(RemoteError::Http { status: 404 })), "{err:?}");
    assert_eq!(err.class(), shelfmatch_core::ErrorClass::Provider);
}

#[test]
fn missing_endpoint_is_a_config_problem() {
    std::env::remove_var(shelfmatch_core::remote::REMOTE_URL_ENV);
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let cfg = PipelineConfig {
        embedder: EmbeddingBackend::Remote,
        ..Default::default()
    };
    let err = Engine::new(cfg, Arc::new(ds.catalog), None).unwrap_err();
    assert!(matches!(err, Error::Remote(RemoteError::NoEndpoint)), "{err:?}");
}
