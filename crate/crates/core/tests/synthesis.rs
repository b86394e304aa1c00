use std::sync::Arc;

use shelfmatch_core::evaluation::top_k_accuracy;
use shelfmatch_core::features::{extract_reference, HarrisConfig};
use shelfmatch_core::pipeline::{Engine, PipelineConfig, QuerySpec, RetrievalResult};
use shelfmatch_core::raster::{load_mask, load_rgb};
use shelfmatch_core::synthesis::{generate_dataset, SynthDataset, SynthSpec};

fn run(ds: &SynthDataset, cfg: PipelineConfig) -> Vec<RetrievalResult> {
    let engine = Engine::new(cfg, Arc::new(ds.catalog.clone()), None).unwrap();
    let specs: Vec<QuerySpec> = ds
        .records
        .iter()
        .map(|r| QuerySpec {
            id: r.query_id.clone(),
            image_path: r.image_path.clone(),
            mask_path: None,
            class: None,
        })
        .collect();
    engine.run_batch(&specs).into_iter().map(|(_, r)| r.unwrap()).collect()
}

/// Front-view gallery keypoints on the product, pushed through the
/// recorded homography, should land on the recorded query mask.
#[test]
fn recorded_homography_maps_product_onto_query_mask() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_products: 12,
        occlusion: [0.0, 0.0],
        seed: 21,
        ..Default::default()
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    let (mut inside, mut total) = (0usize, 0usize);
    for r in &ds.records {
        let (_, front) = ds.catalog.view(&format!("{}_front_view", r.true_product_id)).unwrap();
        let img = load_rgb(&front.image_ref).unwrap();
        let gallery_mask = load_mask(front.mask_ref.as_ref().unwrap()).unwrap();
        let query_mask = load_mask(&r.mask_path).unwrap();
        let fs = extract_reference(&img, Some(&gallery_mask), 500, &HarrisConfig::default());
        for k in &fs.keypoints {
            let (x, y) = r.homography.project((k.x as f64, k.y as f64)).unwrap();
            total += 1;
            if query_mask.contains_point(x as f32, y as f32) {
                inside += 1;
            }
        }
        assert!(r.homography.inverse().is_some());
    }
    assert!(total > 500);
    let frac = inside as f64 / total as f64;
    assert!(frac >= 0.95, "{inside}/{total}");
}

#[test]
fn zero_difficulty_is_solved() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_products: 20,
        corner_jitter: [0.0, 0.0],
        rotation_deg: [0.0, 0.0],
        scale: [1.0, 1.0],
        shift_px: [0.0, 0.0],
        clutter_density: 0.0,
        occlusion: [0.0, 0.0],
        seed: 13,
        ..Default::default()
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    let results = run(&ds, PipelineConfig::default());
    assert_eq!(top_k_accuracy(&results, &ds.labels, 1).unwrap(), 1.0);
}

/// Trend over a small seed ensemble; individual seeds may not be ordered.
#[test]
fn heavy_occlusion_costs_accuracy_on_average() {
    let mut light = 0.0;
    let mut heavy = 0.0;
    for seed in 1..=3 {
        for (occ, acc) in [(0.0, &mut light), (0.6, &mut heavy)] {
            let dir = tempfile::tempdir().unwrap();
            let spec = SynthSpec {
                n_products: 20,
                occlusion: [occ, occ],
                seed,
                ..Default::default()
            };
            let ds = generate_dataset(&spec, dir.path()).unwrap();
            let cfg = PipelineConfig {
                k: 10,
                ..Default::default()
            };
            *acc += top_k_accuracy(&run(&ds, cfg), &ds.labels, 1).unwrap();
        }
    }
    assert!(heavy <= light, "light {light} heavy {heavy}");
}
