use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use shelfmatch_core::catalog::CoarseClass;
use shelfmatch_core::evaluation::{stage1_top_k_accuracy, top_k_accuracy, QueryLabel};
use shelfmatch_core::pipeline::{
    write_results_jsonl, CandidateStrategy, Engine, PipelineConfig, QueryImage, QuerySpec, RetrievalResult,
    TraceDetail,
};
use shelfmatch_core::raster::load_rgb;
use shelfmatch_core::segmentation::SegmenterConfig;
use shelfmatch_core::synthesis::{generate_dataset, SynthDataset, SynthSpec};
use shelfmatch_core::Error;

fn dataset(dir: &Path, n_products: usize, seed: u64) -> SynthDataset {
    let spec = SynthSpec {
        n_products,
        seed,
        ..Default::default()
    };
    generate_dataset(&spec, dir).unwrap()
}

fn specs(ds: &SynthDataset) -> Vec<QuerySpec> {
    ds.records
        .iter()
        .map(|r| QuerySpec {
            id: r.query_id.clone(),
            image_path: r.image_path.clone(),
            mask_path: None,
            class: ds.catalog.product(&r.true_product_id).map(|p| p.coarse_class),
        })
        .collect()
}

fn ok(results: Vec<(String, shelfmatch_core::Result<RetrievalResult>)>) -> Vec<RetrievalResult> {
    results.into_iter().map(|(_, r)| r.unwrap()).collect()
}

#[test]
fn gallery_views_retrieve_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 20, 5);
    let catalog = Arc::new(ds.catalog.clone());
    let cfg = PipelineConfig {
        k: 5,
        ..Default::default()
    };
    let engine = Engine::new(cfg, catalog.clone(), None).unwrap();
    for (pid, v) in catalog.gallery_images() {
        let q = QueryImage {
            id: format!("self-{}", v.image_id),
            image: load_rgb(&v.image_ref).unwrap(),
            mask_ref: None,
            class: None,
        };
        let r = engine.run_query(&q).unwrap();
        assert_eq!(r.ranked[0].product_id, pid, "{}", v.image_id);
        assert!((r.ranked[0].stage1_score - 1.0).abs() <= 1e-6, "{:?}", r.ranked[0]);
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 12, 2);
    let catalog = Arc::new(ds.catalog.clone());
    let queries = specs(&ds);
    let mut outputs = Vec::new();
    for workers in [1, 4, 8] {
        let cfg = PipelineConfig {
            k: 6,
            worker_count: workers,
            ..Default::default()
        };
        let engine = Engine::new(cfg, catalog.clone(), None).unwrap();
        let path = dir.path().join(format!("out-{workers}.jsonl"));
        write_results_jsonl(&ok(engine.run_batch(&queries)), &path, false).unwrap();
        outputs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn a_bad_query_fails_alone() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 6, 3);
    let mut queries = specs(&ds);
    queries.insert(
        2,
        QuerySpec {
            id: "ghost".into(),
            image_path: dir.path().join("does-not-exist.png"),
            mask_path: None,
            class: None,
        },
    );
    let engine = Engine::new(PipelineConfig::default(), Arc::new(ds.catalog.clone()), None).unwrap();
    let out = engine.run_batch(&queries);
    assert_eq!(out.len(), queries.len());
    for ((id, r), q) in out.iter().zip(&queries) {
        assert_eq!(id, &q.id);
        if id == "ghost" {
            assert!(matches!(r, Err(Error::Image { .. })), "{r:?}");
        } else {
            assert!(r.is_ok());
        }
    }
}

#[test]
fn reranking_stays_inside_the_candidate_set() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 30, 4);
    let catalog = Arc::new(ds.catalog.clone());
    for k in [1, 3, 35] {
        let cfg = PipelineConfig {
            k,
            ..Default::default()
        };
        let engine = Engine::new(cfg, catalog.clone(), None).unwrap();
        let results = ok(engine.run_batch(&specs(&ds)));
        for r in &results {
            let ranked: BTreeSet<&str> = r.ranked.iter().map(|e| e.product_id.as_str()).collect();
            let cands: BTreeSet<&str> = r.candidates.product_ids().collect();
            assert_eq!(ranked, cands);
            assert_eq!(r.ranked.len(), k.min(catalog.len()));
            let TraceDetail::Stage3 { pairs, .. } = &r.traces[2].detail else {
                panic!("third trace is stage 3")
            };
            assert!(*pairs <= k * 6);
        }
        assert_eq!(
            top_k_accuracy(&results, &ds.labels, k).unwrap(),
            stage1_top_k_accuracy(&results, &ds.labels, k).unwrap()
        );
    }
}

#[test]
fn disabled_segmentation_equals_identity_segmenter() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 10, 6);
    let catalog = Arc::new(ds.catalog.clone());
    let off = PipelineConfig {
        k: 4,
        segmentation_enabled: false,
        segmenter: SegmenterConfig::Threshold {
            plate: ds.plate_path.clone(),
            threshold: 25,
            min_component: 100,
        },
        ..Default::default()
    };
    let identity = PipelineConfig {
        segmentation_enabled: true,
        segmenter: SegmenterConfig::Identity,
        ..off.clone()
    };
    let a = ok(Engine::new(off, catalog.clone(), None).unwrap().run_batch(&specs(&ds)));
    let b = ok(Engine::new(identity, catalog, None).unwrap().run_batch(&specs(&ds)));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ranked, y.ranked);
        assert_eq!(x.flags, y.flags);
    }
}

#[test]
fn feature_cache_round_trips_through_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 6, 8);
    let catalog = Arc::new(ds.catalog.clone());
    let cfg = PipelineConfig {
        k: 3,
        segmenter: SegmenterConfig::Threshold {
            plate: ds.plate_path.clone(),
            threshold: 25,
            min_component: 100,
        },
        ..Default::default()
    };
    let first = Engine::new(cfg.clone(), catalog.clone(), None).unwrap();
    first.prepare_all().unwrap();
    let cache = dir.path().join("gallery.smfc");
    first.save_cache(&cache).unwrap();

    let second = Engine::new(cfg.clone(), catalog.clone(), None).unwrap();
    second.load_cache(&cache).unwrap();
    assert_eq!(first.gallery_snapshot(), second.gallery_snapshot());
    let a = ok(first.run_batch(&specs(&ds)));
    let b = ok(second.run_batch(&specs(&ds)));
    assert!(b.iter().all(|r| r.gallery_prep_ms < 50.0));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ranked, y.ranked);
    }

    let other = PipelineConfig {
        max_keypoints: 100,
        ..cfg
    };
    let third = Engine::new(other, catalog, None).unwrap();
    assert!(matches!(third.load_cache(&cache), Err(Error::CacheFormat(_))));
}

#[test]
fn class_filter_uses_the_query_class() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 9, 9);
    let catalog = Arc::new(ds.catalog.clone());
    let cfg = PipelineConfig {
        candidate_strategy: CandidateStrategy::ClassFilter,
        ..Default::default()
    };
    let engine = Engine::new(cfg, catalog.clone(), None).unwrap();
    let mut queries = specs(&ds);
    for r in ok(engine.run_batch(&queries)) {
        let label: &QueryLabel = ds.labels.iter().find(|l| l.query_id == r.query_id).unwrap();
        let class = catalog.product(&label.true_product_id).unwrap().coarse_class;
        assert!(r
            .ranked
            .iter()
            .all(|e| catalog.product(&e.product_id).unwrap().coarse_class == class));
    }
    queries[0].class = None;
    let out = engine.run_batch(&queries);
    assert!(matches!(out[0].1, Err(Error::Config(_))));
    queries[0].class = Some(CoarseClass::Unknown);
    let out = engine.run_batch(&queries);
    assert!(matches!(out[0].1, Err(Error::InvalidParameter(_))), "{:?}", out[0].1);
}
