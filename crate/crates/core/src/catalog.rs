//! Gallery data model: products with up to six canonical views, loaded from
//! an explicit JSON manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the six canonical capture angles.
///
/// The declaration order is the fixed enumeration order used everywhere a
/// product's views are walked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLabel {
    BackDrop,
    BottomDrop,
    FrontDrop,
    FrontView,
    SideDrop,
    TopDrop,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 6] = [
        ViewLabel::BackDrop,
        ViewLabel::BottomDrop,
        ViewLabel::FrontDrop,
        ViewLabel::FrontView,
        ViewLabel::SideDrop,
        ViewLabel::TopDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::BackDrop => "back_drop",
            ViewLabel::BottomDrop => "bottom_drop",
            ViewLabel::FrontDrop => "front_drop",
            ViewLabel::FrontView => "front_view",
            ViewLabel::SideDrop => "side_drop",
            ViewLabel::TopDrop => "top_drop",
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewLabel::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownViewLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseClass {
    Bagged,
    Bottled,
    Canned,
    #[default]
    Unknown,
}

impl CoarseClass {
    pub fn as_str(self) -> &'static str {
        match self {
            CoarseClass::Bagged => "bagged",
            CoarseClass::Bottled => "bottled",
            CoarseClass::Canned => "canned",
            CoarseClass::Unknown => "unknown",
        }
    }
}

impl fmt::Display for CoarseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub view: ViewLabel,
    /// Resolved image path.
    pub image_ref: PathBuf,
    /// Resolved mask path, when the manifest provides one.
    pub mask_ref: Option<PathBuf>,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductRecord {
    pub product_id: String,
    pub display_name: String,
    pub coarse_class: CoarseClass,
    /// Sorted by [`ViewLabel`] order, labels distinct.
    pub views: Vec<ViewImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogManifest {
    pub products: Vec<ProductRecord>,
    pub root_dir: PathBuf,
    pub embedding_store_ref: Option<PathBuf>,
}

// On-disk schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub root_dir: String,
    #[serde(default)]
    pub embedding_store: Option<String>,
    pub products: Vec<ManifestProduct>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestProduct {
    pub product_id: String,
    pub display_name: String,
    #[serde(default)]
    pub coarse_class: CoarseClass,
    pub views: Vec<ManifestView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub view: String,
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub image_id: String,
}

/// Reads and validates a manifest. Relative `root_dir` is taken relative to
/// the manifest's own directory; asset paths are relative to `root_dir`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CatalogManifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::ManifestParse(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    CatalogManifest::from_file(file, base, true)
}

impl CatalogManifest {
    /// Validates a parsed manifest. With `check_assets`, every referenced
    /// image and mask must exist on disk.
    pub fn from_file(file: ManifestFile, base_dir: &Path, check_assets: bool) -> Result<Self> {
        let root_dir = resolve(base_dir, &file.root_dir);
        if file.products.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut product_ids = HashSet::new();
        let mut image_ids = HashSet::new();
        let mut products = Vec::with_capacity(file.products.len());

        for p in file.products {
            if !product_ids.insert(p.product_id.clone()) {
                return Err(Error::DuplicateProductId(p.product_id));
            }
            if p.views.is_empty() || p.views.len() > ViewLabel::ALL.len() {
                return Err(Error::InvalidViews {
                    product: p.product_id,
                    reason: "expected between 1 and 6 views".into(),
                });
            }
            let mut seen = HashSet::new();
            let mut views = Vec::with_capacity(p.views.len());
            for v in p.views {
                let label: ViewLabel = v.view.parse()?;
                if !seen.insert(label) {
                    return Err(Error::InvalidViews {
                        product: p.product_id,
                        reason: format!("view {label} listed twice"),
                    });
                }
                if !image_ids.insert(v.image_id.clone()) {
                    return Err(Error::DuplicateImageId(v.image_id));
                }
                let image_ref = resolve(&root_dir, &v.image);
                let mask_ref = v.mask.as_deref().map(|m| resolve(&root_dir, m));
                if check_assets {
                    for asset in std::iter::once(&image_ref).chain(mask_ref.as_ref()) {
                        if !asset.is_file() {
                            return Err(Error::MissingAsset(asset.clone()));
                        }
                    }
                }
                views.push(ViewImage {
                    view: label,
                    image_ref,
                    mask_ref,
                    image_id: v.image_id,
                });
            }
            views.sort_by_key(|v| v.view);
            products.push(ProductRecord {
                product_id: p.product_id,
                display_name: p.display_name,
                coarse_class: p.coarse_class,
                views,
            });
        }

        Ok(CatalogManifest {
            products,
            embedding_store_ref: file.embedding_store.map(|s| resolve(&root_dir, &s)),
            root_dir,
        })
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.products.iter().map(|p| p.views.len()).sum()
    }

    pub fn product(&self, product_id: &str) -> Option<&ProductRecord> {
        self.products.iter().find(|p| p.product_id == product_id)
    }

    /// Looks up a gallery image by id.
    pub fn view(&self, image_id: &str) -> Option<(&ProductRecord, &ViewImage)> {
        self.products.iter().find_map(|p| {
            p.views
                .iter()
                .find(|v| v.image_id == image_id)
                .map(|v| (p, v))
        })
    }

    /// Every gallery image, products in manifest order and views in
    /// [`ViewLabel`] order.
    pub fn gallery_images(&self) -> Vec<(&str, &ViewImage)> {
        self.products
            .iter()
            .flat_map(|p| p.views.iter().map(move |v| (p.product_id.as_str(), v)))
            .collect()
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product(id: &str, views: &[(&str, &str)]) -> ManifestProduct {
        ManifestProduct {
            product_id: id.into(),
            display_name: format!("Product {id}"),
            coarse_class: CoarseClass::Unknown,
            views: views
                .iter()
                .map(|(label, image_id)| ManifestView {
                    view: label.to_string(),
                    image: format!("{image_id}.png"),
                    mask: None,
                    image_id: image_id.to_string(),
                })
                .collect(),
        }
    }

    fn manifest(products: Vec<ManifestProduct>) -> ManifestFile {
        ManifestFile {
            root_dir: ".".into(),
            embedding_store: None,
            products,
        }
    }

    fn all_views(prefix: &str) -> Vec<(&'static str, String)> {
        ViewLabel::ALL
            .iter()
            .map(|v| (v.as_str(), format!("{prefix}_{}", v.as_str())))
            .collect()
    }

    fn full_product(id: &str) -> ManifestProduct {
        let views = all_views(id);
        let refs: Vec<(&str, &str)> = views.iter().map(|(a, b)| (*a, b.as_str())).collect();
        product(id, &refs)
    }

    #[test]
    fn paper_scale_catalog_counts() {
        let products = (0..394).map(|i| full_product(&format!("p{i:03}"))).collect();
        let cat = CatalogManifest::from_file(manifest(products), Path::new("/"), false).unwrap();
        assert_eq!(cat.len(), 394);
        assert_eq!(cat.image_count(), 2364);
        assert_eq!(cat.gallery_images().len(), 2364);
    }

    #[test]
    fn minimal_catalog() {
        let cat = CatalogManifest::from_file(
            manifest(vec![product("a", &[("front_view", "a0")])]),
            Path::new("/"),
            false,
        )
        .unwrap();
        assert_eq!(cat.len(), 1);
        assert_eq!(cat.image_count(), 1);
    }

    #[test]
    fn duplicate_product_id_rejected() {
        let m = manifest(vec![
            product("a", &[("front_view", "a0")]),
            product("a", &[("front_view", "a1")]),
        ]);
        let err = CatalogManifest::from_file(m, Path::new("/"), false).unwrap_err();
        assert!(matches!(err, Error::DuplicateProductId(id) if id == "a"));
    }

    #[test]
    fn duplicate_image_id_rejected() {
        let m = manifest(vec![
            product("a", &[("front_view", "x")]),
            product("b", &[("front_view", "x")]),
        ]);
        let err = CatalogManifest::from_file(m, Path::new("/"), false).unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(_)));
    }

    #[test]
    fn unknown_view_and_repeated_view_rejected() {
        let m = manifest(vec![product("a", &[("left_view", "a0")])]);
        let err = CatalogManifest::from_file(m, Path::new("/"), false).unwrap_err();
        assert!(matches!(err, Error::UnknownViewLabel(_)));

        let m = manifest(vec![product("a", &[("top_drop", "a0"), ("top_drop", "a1")])]);
        let err = CatalogManifest::from_file(m, Path::new("/"), false).unwrap_err();
        assert!(matches!(err, Error::InvalidViews { .. }));
    }

    #[test]
    fn empty_catalog_rejected() {
        let err = CatalogManifest::from_file(manifest(vec![]), Path::new("/"), false).unwrap_err();
        assert!(matches!(err, Error::EmptyCatalog));
    }

    #[test]
    fn missing_asset_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(vec![product("a", &[("front_view", "a0")])]);
        std::fs::write(dir.path().join("m.json"), serde_json::to_vec(&m).unwrap()).unwrap();
        let err = load_manifest(dir.path().join("m.json")).unwrap_err();
        assert!(matches!(err, Error::MissingAsset(_)));

        std::fs::write(dir.path().join("a0.png"), b"x").unwrap();
        let cat = load_manifest(dir.path().join("m.json")).unwrap();
        assert_eq!(cat.products[0].views[0].image_ref, dir.path().join("./a0.png"));
    }

    #[test]
    fn gallery_order_is_fixed() {
        let m = manifest(vec![
            product("b", &[("top_drop", "b5"), ("back_drop", "b0"), ("front_view", "b3")]),
            full_product("a"),
        ]);
        let cat = CatalogManifest::from_file(m, Path::new("/"), false).unwrap();
        let order: Vec<_> = cat
            .gallery_images()
            .iter()
            .map(|(p, v)| format!("{p}:{}", v.view))
            .collect();
        assert_eq!(&order[..3], ["b:back_drop", "b:front_view", "b:top_drop"]);
        assert_eq!(order.len(), 9);
        assert_eq!(order[3], "a:back_drop");
        assert_eq!(order[8], "a:top_drop");
        let again: Vec<_> = cat
            .gallery_images()
            .iter()
            .map(|(p, v)| format!("{p}:{}", v.view))
            .collect();
        assert_eq!(order, again);
    }

    #[test]
    fn parse_error_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.json"), b"{not json").unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("m.json")).unwrap_err(),
            Error::ManifestParse(_)
        ));
    }
}
