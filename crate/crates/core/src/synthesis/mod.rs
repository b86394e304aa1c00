//! Synthetic catalogs and query sets with exact ground truth.
//!
//! Products come in look-alike families that share artwork and differ only
//! in a bottom band of glyphs. Gallery views place the artwork on a plain
//! background plate under fixed per-view warps; queries warp the front view
//! by a random homography, add distractor crops in the margins, occlude one
//! side of the product with plate-coloured paint, and jitter intensities.

mod art;

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use art::{composite, family_art, stamp_variant, Photometric};

use crate::catalog::{CatalogManifest, CoarseClass, ManifestFile, ManifestProduct, ManifestView, ViewLabel};
use crate::error::{Error, Result};
use crate::evaluation::{QueryEntry, QueryLabel};
use crate::matching::{fit_homography, Homography};
use crate::raster::{save_mask, save_png_rgb};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUERIES_FILE: &str = "queries.json";
pub const PLATE_FILE: &str = "plate.png";
pub const SPEC_FILE: &str = "spec.json";

/// Minimum gap between a distractor and the product (or another
/// distractor), so background differencing keeps them apart.
const CLUTTER_GAP: i64 = 3;
/// Distractors placed per unit of clutter density.
const CLUTTER_SLOTS: f64 = 10.0;
/// Placement tries per distractor before giving up on it.
const CLUTTER_TRIES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_products: usize,
    pub n_queries_per_product: usize,
    /// Width, height.
    pub canvas: [u32; 2],
    pub art_size: [u32; 2],
    /// Per-corner perspective displacement, as a fraction of art size.
    pub corner_jitter: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub shift_px: [f64; 2],
    /// 0 = no distractors; 1 = the maximum number of placement attempts.
    pub clutter_density: f64,
    /// Fraction of the artwork hidden on one side.
    pub occlusion: [f64; 2],
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    /// Products per look-alike family.
    pub similarity_groups: usize,
    /// Height fraction of the product-specific band.
    pub glyph_patch: f64,
    pub plate: [u8; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_products: 50,
            n_queries_per_product: 1,
            canvas: [160, 160],
            art_size: [64, 80],
            corner_jitter: [0.0, 0.04],
            rotation_deg: [-6.0, 6.0],
            scale: [0.9, 1.1],
            shift_px: [-6.0, 6.0],
            clutter_density: 1.0,
            occlusion: [0.0, 0.2],
            brightness: [-20.0, 20.0],
            contrast: [0.85, 1.15],
            similarity_groups: 5,
            glyph_patch: 0.5,
            plate: [128, 128, 128],
            seed: 7,
        }
    }
}

fn ordered(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} range {r:?} is not well-ordered")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_products == 0 {
            return Err(Error::Config("n_products must be at least 1".into()));
        }
        if self.similarity_groups == 0 {
            return Err(Error::Config("similarity_groups must be at least 1".into()));
        }
        if self.art_size.iter().any(|&s| s < 24) {
            return Err(Error::Config("art_size must be at least 24 on each side".into()));
        }
        if self.canvas[0] < self.art_size[0] + 16 || self.canvas[1] < self.art_size[1] + 16 {
            return Err(Error::Config("canvas must exceed art_size by at least 16 px".into()));
        }
        ordered("corner_jitter", self.corner_jitter)?;
        ordered("rotation_deg", self.rotation_deg)?;
        ordered("scale", self.scale)?;
        ordered("shift_px", self.shift_px)?;
        ordered("occlusion", self.occlusion)?;
        ordered("brightness", self.brightness)?;
        ordered("contrast", self.contrast)?;
        if self.scale[0] <= 0.0 || self.contrast[0] < 0.0 {
            return Err(Error::Config("scale must be positive and contrast non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion[0]) || self.occlusion[1] >= 1.0 {
            return Err(Error::Config("occlusion must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) || !(0.0..1.0).contains(&self.glyph_patch) {
            return Err(Error::Config("clutter_density must lie in [0, 1] and glyph_patch in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_families(&self) -> usize {
        self.n_products.div_ceil(self.similarity_groups)
    }

    fn plate_rgb(&self) -> Rgb<u8> {
        Rgb(self.plate)
    }

    fn rng(&self, domain: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(domain << 40 | index);
        rng
    }

    /// Art corners centred on the canvas: the front-view placement.
    fn front_corners(&self) -> [(f64, f64); 4] {
        let (cx, cy) = (self.canvas[0] as f64 / 2.0, self.canvas[1] as f64 / 2.0);
        let (hw, hh) = (self.art_size[0] as f64 / 2.0, self.art_size[1] as f64 / 2.0);
        [(cx - hw, cy - hh), (cx + hw, cy - hh), (cx + hw, cy + hh), (cx - hw, cy + hh)]
    }

    fn art_corners(&self) -> [(f64, f64); 4] {
        let (w, h) = (self.art_size[0] as f64, self.art_size[1] as f64);
        // Pixel centres span [-0.5, w - 0.5).
        [(-0.5, -0.5), (w - 0.5, -0.5), (w - 0.5, h - 0.5), (-0.5, h - 0.5)]
    }

    /// Art → canvas map for a gallery view.
    fn view_placement(&self, view: ViewLabel) -> Homography {
        let [tl, tr, br, bl] = self.front_corners();
        let (cx, cy) = (self.canvas[0] as f64 / 2.0, self.canvas[1] as f64 / 2.0);
        let inset = self.art_size[0] as f64 * 0.1;
        let squash = |p: (f64, f64), sx: f64, sy: f64| (cx + (p.0 - cx) * sx, cy + (p.1 - cy) * sy);
        let dst = match view {
            ViewLabel::FrontView => [tl, tr, br, bl],
            ViewLabel::FrontDrop => [(tl.0 + inset, tl.1), (tr.0 - inset, tr.1), br, bl],
            ViewLabel::BottomDrop => [tl, tr, (br.0 - inset, br.1), (bl.0 + inset, bl.1)],
            ViewLabel::SideDrop => [squash(tl, 0.8, 1.0), squash(tr, 0.8, 1.0), squash(br, 0.8, 1.0), squash(bl, 0.8, 1.0)],
            ViewLabel::TopDrop => [squash(tl, 1.0, 0.8), squash(tr, 1.0, 0.8), squash(br, 1.0, 0.8), squash(bl, 1.0, 0.8)],
            ViewLabel::BackDrop => [(tl.0 + inset, tl.1), (tr.0 + inset, tr.1), br, bl],
        };
        fit_homography(&self.art_corners(), &dst).expect("view placement is non-degenerate")
    }
}

/// Ground truth for one generated query.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub query_id: String,
    pub image_path: PathBuf,
    pub true_product_id: String,
    pub mask_path: PathBuf,
    /// Front-view gallery coordinates → query coordinates.
    pub homography: Homography,
    /// Occluded region in query coordinates (empty when unoccluded).
    pub occlusion_polygons: Vec<[(f64, f64); 4]>,
    pub occlusion_frac: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub catalog: CatalogManifest,
    pub records: Vec<SynthRecord>,
    pub labels: Vec<QueryLabel>,
    pub manifest_path: PathBuf,
    pub queries_path: PathBuf,
    pub plate_path: PathBuf,
}

fn product_id(i: usize) -> String {
    format!("p{i:04}")
}

fn family_of(spec: &SynthSpec, i: usize) -> usize {
    i / spec.similarity_groups
}

fn family_class(family: usize) -> CoarseClass {
    [CoarseClass::Bagged, CoarseClass::Bottled, CoarseClass::Canned][family % 3]
}

/// Artwork of every product, index-aligned with product ids.
fn all_art(spec: &SynthSpec) -> Vec<RgbImage> {
    let size = (spec.art_size[0], spec.art_size[1]);
    let families: Vec<RgbImage> = (0..spec.n_families())
        .into_par_iter()
        .map(|f| family_art(&mut spec.rng(1, f as u64), size, spec.glyph_patch, spec.plate_rgb()))
        .collect();
    (0..spec.n_products)
        .into_par_iter()
        .map(|i| {
            let mut art = families[family_of(spec, i)].clone();
            stamp_variant(&mut art, &mut spec.rng(2, i as u64), spec.glyph_patch, spec.plate_rgb());
            art
        })
        .collect()
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the plate, gallery images and masks, and `manifest.json` under
/// `out_dir`.
pub fn generate_catalog(spec: &SynthSpec, out_dir: &Path) -> Result<CatalogManifest> {
    spec.validate()?;
    let art = all_art(spec);
    write_catalog(spec, &art, out_dir)
}

fn write_catalog(spec: &SynthSpec, art: &[RgbImage], out_dir: &Path) -> Result<CatalogManifest> {
    create_dir(&out_dir.join("gallery"))?;
    let plate = RgbImage::from_pixel(spec.canvas[0], spec.canvas[1], spec.plate_rgb());
    save_png_rgb(&plate, &out_dir.join(PLATE_FILE))?;
    std::fs::write(out_dir.join(SPEC_FILE), serde_json::to_vec_pretty(spec)?)
        .map_err(|e| Error::io(out_dir.join(SPEC_FILE), e))?;

    let products = (0..spec.n_products)
        .into_par_iter()
        .map(|i| {
            let pid = product_id(i);
            let mut views = Vec::with_capacity(ViewLabel::ALL.len());
            for view in ViewLabel::ALL {
                let mut canvas = plate.clone();
                let mask = composite(
                    &mut canvas,
                    &art[i],
                    &spec.view_placement(view),
                    Photometric::NONE,
                    &|_, _| false,
                    spec.plate_rgb(),
                );
                let image = format!("gallery/{pid}_{view}.png");
                let mask_file = format!("gallery/{pid}_{view}_mask.png");
                save_png_rgb(&canvas, &out_dir.join(&image))?;
                save_mask(&mask, &out_dir.join(&mask_file))?;
                views.push(ManifestView {
                    view: view.to_string(),
                    image,
                    mask: Some(mask_file),
                    image_id: format!("{pid}_{view}"),
                });
            }
            let family = family_of(spec, i);
            Ok(ManifestProduct {
                product_id: pid,
                display_name: format!("family {family} variant {}", i % spec.similarity_groups),
                coarse_class: family_class(family),
                views,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let file = ManifestFile {
        root_dir: ".".into(),
        embedding_store: None,
        products,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    CatalogManifest::from_file(file, out_dir, true)
}

/// Random query warp about the canvas centre, constrained to keep the
/// product inside the canvas.
fn sample_warp(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Homography {
    let front = spec.front_corners();
    let (cx, cy) = (spec.canvas[0] as f64 / 2.0, spec.canvas[1] as f64 / 2.0);
    let (w, h) = (spec.canvas[0] as f64, spec.canvas[1] as f64);
    for _ in 0..100 {
        let theta = uniform(rng, spec.rotation_deg).to_radians();
        let s = uniform(rng, spec.scale);
        let (tx, ty) = (uniform(rng, spec.shift_px), uniform(rng, spec.shift_px));
        let jitter = [spec.art_size[0] as f64, spec.art_size[1] as f64];
        let dst: Vec<(f64, f64)> = front
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - cx, y - cy);
                let rx = s * (theta.cos() * dx - theta.sin() * dy) + cx + tx;
                let ry = s * (theta.sin() * dx + theta.cos() * dy) + cy + ty;
                let jx = uniform(rng, spec.corner_jitter) * jitter[0] * if rng.random() { 1.0 } else { -1.0 };
                let jy = uniform(rng, spec.corner_jitter) * jitter[1] * if rng.random() { 1.0 } else { -1.0 };
                (rx + jx, ry + jy)
            })
            .collect();
        if dst.iter().all(|p| p.0 >= 2.0 && p.0 < w - 2.0 && p.1 >= 2.0 && p.1 < h - 2.0) {
            // Without jitter the warp is a similarity; build it exactly so a
            // null warp is the identity rather than a DLT fit of one.
            if spec.corner_jitter == [0.0, 0.0] {
                let (c, sn) = (s * theta.cos(), s * theta.sin());
                let rows = [
                    [c, -sn, cx + tx - c * cx + sn * cy],
                    [sn, c, cy + ty - sn * cx - c * cy],
                    [0.0, 0.0, 1.0],
                ];
                if let Some(hm) = Homography::from_rows(rows) {
                    return hm;
                }
            } else if let Some(hm) = fit_homography(&front, &dst) {
                return hm;
            }
        }
    }
    Homography::identity()
}

/// Art-space region hidden by the occluder: a band along one side.
#[derive(Debug, Clone, Copy)]
struct Occluder {
    side: u8,
    frac: f64,
}

impl Occluder {
    fn hides(&self, u: f64, v: f64, w: f64, h: f64) -> bool {
        let (fu, fv) = ((u + 0.5) / w, (v + 0.5) / h);
        match self.side {
            0 => fu < self.frac,
            1 => fu >= 1.0 - self.frac,
            2 => fv < self.frac,
            _ => fv >= 1.0 - self.frac,
        }
    }

    /// Band corners in art space.
    fn polygon(&self, w: f64, h: f64) -> [(f64, f64); 4] {
        let (a, b) = (-0.5, w - 0.5);
        let (c, d) = (-0.5, h - 0.5);
        let (fw, fh) = (self.frac * w, self.frac * h);
        match self.side {
            0 => [(a, c), (a + fw, c), (a + fw, d), (a, d)],
            1 => [(b - fw, c), (b, c), (b, d), (b - fw, d)],
            2 => [(a, c), (b, c), (b, c + fh), (a, c + fh)],
            _ => [(a, d - fh), (b, d - fh), (b, d), (a, d)],
        }
    }
}

/// Pastes crops of other products' artwork into free background space.
fn add_clutter(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    canvas: &mut RgbImage,
    product: usize,
    product_box: [i64; 4],
    art: &[RgbImage],
) {
    let wanted = (spec.clutter_density * CLUTTER_SLOTS).round() as usize;
    if wanted == 0 || art.len() < 2 {
        return;
    }
    let (cw, ch) = (canvas.width() as i64, canvas.height() as i64);
    let mut taken = vec![product_box];
    let family = family_of(spec, product);
    for _ in 0..wanted * CLUTTER_TRIES {
        if taken.len() > wanted {
            break;
        }
        // Prefer look-alikes: a sibling half the time, when there is one.
        let siblings: Vec<usize> = (0..art.len())
            .filter(|&j| j != product && family_of(spec, j) == family)
            .collect();
        let src = if !siblings.is_empty() && rng.random_bool(0.5) {
            siblings[rng.random_range(0..siblings.len())]
        } else {
            let j = rng.random_range(0..art.len() - 1);
            if j >= product {
                j + 1
            } else {
                j
            }
        };
        let a = &art[src];
        let side_max = (a.width().min(a.height()) as i64).min(32);
        let (w, h) = (rng.random_range(16..=side_max), rng.random_range(16..=side_max));
        let (sx, sy) = (
            rng.random_range(0..=a.width() as i64 - w),
            rng.random_range(0..=a.height() as i64 - h),
        );
        if cw - w <= 0 || ch - h <= 0 {
            continue;
        }
        let (x, y) = (rng.random_range(0..cw - w), rng.random_range(0..ch - h));
        let rect = [x, y, x + w, y + h];
        let clear = taken.iter().all(|t| {
            rect[2] + CLUTTER_GAP <= t[0] || t[2] + CLUTTER_GAP <= rect[0] || rect[3] + CLUTTER_GAP <= t[1] || t[3] + CLUTTER_GAP <= rect[1]
        });
        if !clear {
            continue;
        }
        for dy in 0..h {
            for dx in 0..w {
                canvas.put_pixel((x + dx) as u32, (y + dy) as u32, *a.get_pixel((sx + dx) as u32, (sy + dy) as u32));
            }
        }
        taken.push(rect);
    }
}

fn render_query(
    spec: &SynthSpec,
    art: &[RgbImage],
    product: usize,
    q: usize,
    dir: &Path,
) -> Result<(SynthRecord, QueryEntry)> {
    let mut rng = spec.rng(3, (product * spec.n_queries_per_product + q) as u64);
    let warp = sample_warp(spec, &mut rng);
    let placement = warp
        .compose(&spec.view_placement(ViewLabel::FrontView))
        .expect("warp composes with placement");

    let frac = uniform(&mut rng, spec.occlusion);
    let occluder = Occluder {
        side: rng.random_range(0..4),
        frac,
    };
    let photo = Photometric {
        brightness: uniform(&mut rng, spec.brightness),
        contrast: uniform(&mut rng, spec.contrast),
    };

    let (aw, ah) = (spec.art_size[0] as f64, spec.art_size[1] as f64);
    let plate = spec.plate_rgb();
    let mut canvas = RgbImage::from_pixel(spec.canvas[0], spec.canvas[1], plate);
    let hidden = |u: f64, v: f64| frac > 0.0 && occluder.hides(u, v, aw, ah);
    // Footprint of the whole product, occluded part included.
    let mut footprint = canvas.clone();
    let full = composite(&mut footprint, &art[product], &placement, Photometric::NONE, &|_, _| false, plate);
    let [x1, y1, x2, y2] = full.bounding_box().expect("product lands on the canvas");
    add_clutter(
        spec,
        &mut rng,
        &mut canvas,
        product,
        [x1 as i64, y1 as i64, x2 as i64, y2 as i64],
        art,
    );
    let mask = composite(&mut canvas, &art[product], &placement, photo, &hidden, plate);

    let query_id = format!("q{product:04}_{q:02}");
    let image = format!("queries/{query_id}.png");
    let mask_file = format!("queries/{query_id}_mask.png");
    save_png_rgb(&canvas, &dir.join(&image))?;
    save_mask(&mask, &dir.join(&mask_file))?;

    let occlusion_polygons = if frac > 0.0 {
        let poly = occluder.polygon(aw, ah).map(|p| placement.project(p).expect("finite corner"));
        vec![poly]
    } else {
        Vec::new()
    };
    let pid = product_id(product);
    Ok((
        SynthRecord {
            query_id: query_id.clone(),
            image_path: dir.join(&image),
            true_product_id: pid.clone(),
            mask_path: dir.join(&mask_file),
            homography: warp,
            occlusion_polygons,
            occlusion_frac: frac,
        },
        QueryEntry {
            query_id,
            image,
            true_product_id: pid,
            mask: Some(mask_file),
            homography: Some(warp.to_array()),
            occlusion_frac: frac,
        },
    ))
}

/// Renders queries for every catalog product and writes `queries.json`.
pub fn generate_queries(
    spec: &SynthSpec,
    catalog: &CatalogManifest,
    out_dir: &Path,
) -> Result<(Vec<SynthRecord>, Vec<QueryLabel>)> {
    spec.validate()?;
    if catalog.len() != spec.n_products || (0..spec.n_products).any(|i| catalog.product(&product_id(i)).is_none()) {
        return Err(Error::Dataset("catalog was not generated from this spec".into()));
    }
    let art = all_art(spec);
    write_queries(spec, &art, out_dir)
}

fn write_queries(spec: &SynthSpec, art: &[RgbImage], out_dir: &Path) -> Result<(Vec<SynthRecord>, Vec<QueryLabel>)> {
    create_dir(&out_dir.join("queries"))?;
    let jobs: Vec<(usize, usize)> = (0..spec.n_products)
        .flat_map(|p| (0..spec.n_queries_per_product).map(move |q| (p, q)))
        .collect();
    let rendered = jobs
        .par_iter()
        .map(|&(p, q)| render_query(spec, art, p, q, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let (records, entries): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let path = out_dir.join(QUERIES_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&path, e))?;
    let labels = records
        .iter()
        .map(|r| QueryLabel {
            query_id: r.query_id.clone(),
            true_product_id: r.true_product_id.clone(),
        })
        .collect();
    Ok((records, labels))
}

/// Catalog plus queries in one pass.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthDataset> {
    spec.validate()?;
    let art = all_art(spec);
    let catalog = write_catalog(spec, &art, out_dir)?;
    let (records, labels) = if spec.n_queries_per_product > 0 {
        write_queries(spec, &art, out_dir)?
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(SynthDataset {
        catalog,
        records,
        labels,
        manifest_path: out_dir.join(MANIFEST_FILE),
        queries_path: out_dir.join(QUERIES_FILE),
        plate_path: out_dir.join(PLATE_FILE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{load_mask, load_rgb};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_products: 6,
            n_queries_per_product: 1,
            similarity_groups: 3,
            seed,
            ..Default::default()
        }
    }

    fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "gallery", "queries"] {
            let d = dir.join(sub);
            let mut files: Vec<_> = std::fs::read_dir(&d)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                out.push((f.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&f).unwrap()));
            }
        }
        out
    }

    #[test]
    fn deterministic_from_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&small(7), a.path()).unwrap();
        generate_dataset(&small(7), b.path()).unwrap();
        assert_eq!(read_tree(a.path()), read_tree(b.path()));
    }

    #[test]
    fn family_arithmetic_and_minimal_catalog() {
        let spec = SynthSpec {
            n_products: 50,
            similarity_groups: 5,
            ..Default::default()
        };
        assert_eq!(spec.n_families(), 10);
        let dir = tempfile::tempdir().unwrap();
        let one = SynthSpec {
            n_products: 1,
            n_queries_per_product: 0,
            ..Default::default()
        };
        let ds = generate_dataset(&one, dir.path()).unwrap();
        assert_eq!(ds.catalog.len(), 1);
        assert_eq!(ds.catalog.image_count(), 6);
    }

    #[test]
    fn degenerate_ranges_reproduce_the_front_view() {
        let spec = SynthSpec {
            n_products: 2,
            corner_jitter: [0.0, 0.0],
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            shift_px: [0.0, 0.0],
            clutter_density: 0.0,
            occlusion: [0.0, 0.0],
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        let r = &ds.records[0];
        let (_, front) = ds.catalog.view("p0000_front_view").unwrap();
        assert_eq!(load_rgb(&r.image_path).unwrap(), load_rgb(&front.image_ref).unwrap());
        assert_eq!(
            load_mask(&r.mask_path).unwrap(),
            load_mask(front.mask_ref.as_ref().unwrap()).unwrap()
        );
    }

    #[test]
    fn occlusion_reduces_mask_area() {
        let spec = SynthSpec {
            n_products: 5,
            occlusion: [0.3, 0.3],
            clutter_density: 0.0,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        for r in &ds.records {
            let visible = load_mask(&r.mask_path).unwrap().count() as f64;
            // Unoccluded footprint of the same warp.
            let art = RgbImage::from_pixel(spec.art_size[0], spec.art_size[1], Rgb([0, 0, 0]));
            let mut canvas = RgbImage::new(spec.canvas[0], spec.canvas[1]);
            let placement = r.homography.compose(&spec.view_placement(ViewLabel::FrontView)).unwrap();
            let full = composite(&mut canvas, &art, &placement, Photometric::NONE, &|_, _| false, Rgb([9, 9, 9]));
            let reduction = 1.0 - visible / full.count() as f64;
            assert!((reduction - 0.3).abs() < 0.05, "reduction {reduction}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { n_products: 0, ..Default::default() }.validate().is_err());
        assert!(SynthSpec { scale: [1.2, 0.8], ..Default::default() }.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
        let json = serde_json::to_string(&SynthSpec::default()).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&json).unwrap(), SynthSpec::default());
    }
}
