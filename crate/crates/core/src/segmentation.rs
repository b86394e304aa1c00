//! Stage 2: segmenter providers, primary-detection selection and mask-gated
//! cropping.
//!
//! The primary detection is the one with the largest box area (ties go to
//! the lowest index). Its box is cut out of the source image and every pixel
//! outside its mask is set to black. When a segmenter finds nothing, the
//! whole image is used unmasked and the fallback is reported.

use std::path::PathBuf;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_mask, load_rgb, ImageInput, Mask};
use crate::remote::RemoteClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    /// Validates `0 ≤ x1 < x2 ≤ width` and `0 ≤ y1 < y2 ≤ height`.
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32, dims: (u32, u32)) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 || x2 > dims.0 || y2 > dims.1 {
            return Err(Error::BoxOutOfBounds([x1, y1, x2, y2], dims.0, dims.1));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Full-frame mask with the source image's dimensions.
    pub mask: Mask,
    pub label: String,
    pub score: f32,
}

impl Detection {
    pub fn validate(&self, dims: (u32, u32)) -> Result<()> {
        BoundingBox::new(self.bbox.x1, self.bbox.y1, self.bbox.x2, self.bbox.y2, dims)?;
        if self.mask.dims() != dims {
            return Err(Error::InvalidDetection(format!(
                "mask is {:?}, image is {:?}",
                self.mask.dims(),
                dims
            )));
        }
        if self.mask.count() == 0 {
            return Err(Error::InvalidDetection("mask has no foreground".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidDetection(format!("score {} outside [0,1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentationOutput {
    pub detections: Vec<Detection>,
    pub source_dims: (u32, u32),
}

impl SegmentationOutput {
    pub fn validate(&self) -> Result<()> {
        self.detections
            .iter()
            .try_for_each(|d| d.validate(self.source_dims))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmenterConfig {
    /// Whole image, full mask.
    Identity,
    /// Reads the mask referenced by the catalog (or query list).
    MaskFile,
    /// Background differencing against a known plate.
    Threshold {
        plate: PathBuf,
        #[serde(default = "default_threshold")]
        threshold: u8,
        #[serde(default = "default_min_component")]
        min_component: usize,
    },
    Remote,
}

fn default_threshold() -> u8 {
    25
}

fn default_min_component() -> usize {
    100
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig::Identity
    }
}

#[derive(Debug, Clone)]
pub enum SegmenterProvider {
    Identity,
    MaskFile,
    Threshold(ThresholdSegmenter),
    Remote(Arc<RemoteClient>),
}

impl SegmenterProvider {
    pub fn from_config(cfg: &SegmenterConfig, remote: Option<&Arc<RemoteClient>>) -> Result<Self> {
        Ok(match cfg {
            SegmenterConfig::Identity => SegmenterProvider::Identity,
            SegmenterConfig::MaskFile => SegmenterProvider::MaskFile,
            SegmenterConfig::Threshold {
                plate,
                threshold,
                min_component,
            } => SegmenterProvider::Threshold(ThresholdSegmenter {
                plate: Arc::new(load_rgb(plate)?),
                threshold: *threshold,
                min_component: *min_component,
            }),
            SegmenterConfig::Remote => SegmenterProvider::Remote(
                remote
                    .cloned()
                    .ok_or_else(|| Error::Config("remote segmenter without endpoint".into()))?,
            ),
        })
    }

    pub fn segment(&self, input: ImageInput<'_>) -> Result<SegmentationOutput> {
        let dims = input.image.dimensions();
        let out = match self {
            SegmenterProvider::Identity => SegmentationOutput {
                detections: vec![Detection {
                    bbox: BoundingBox::new(0, 0, dims.0, dims.1, dims)?,
                    mask: Mask::full(dims.0, dims.1),
                    label: "image".into(),
                    score: 1.0,
                }],
                source_dims: dims,
            },
            SegmenterProvider::MaskFile => {
                let path = input
                    .mask_ref
                    .ok_or_else(|| Error::MissingMask(input.id.to_string()))?;
                let mask = load_mask(path)?;
                if mask.dims() != dims {
                    return Err(Error::InvalidDetection(format!(
                        "mask {} is {:?}, image is {:?}",
                        path.display(),
                        mask.dims(),
                        dims
                    )));
                }
                let detections = match mask.bounding_box() {
                    Some([x1, y1, x2, y2]) => vec![Detection {
                        bbox: BoundingBox::new(x1, y1, x2, y2, dims)?,
                        mask,
                        label: "mask".into(),
                        score: 1.0,
                    }],
                    None => Vec::new(),
                };
                SegmentationOutput {
                    detections,
                    source_dims: dims,
                }
            }
            SegmenterProvider::Threshold(t) => t.segment(input.image)?,
            SegmenterProvider::Remote(client) => client.segment(input.image)?,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Foreground = pixels whose largest per-channel absolute difference from
/// the plate exceeds `threshold`; each 8-connected foreground component of
/// at least `min_component` pixels is one detection.
#[derive(Debug, Clone)]
pub struct ThresholdSegmenter {
    pub plate: Arc<RgbImage>,
    pub threshold: u8,
    pub min_component: usize,
}

impl ThresholdSegmenter {
    pub fn new(plate: RgbImage) -> Self {
        ThresholdSegmenter {
            plate: Arc::new(plate),
            threshold: default_threshold(),
            min_component: default_min_component(),
        }
    }

    pub fn foreground(&self, image: &RgbImage) -> Result<Mask> {
        if image.dimensions() != self.plate.dimensions() {
            return Err(Error::InvalidDetection(format!(
                "image is {:?}, background plate is {:?}",
                image.dimensions(),
                self.plate.dimensions()
            )));
        }
        let (w, h) = image.dimensions();
        Ok(Mask::from_fn(w, h, |x, y| {
            let a = image.get_pixel(x, y);
            let b = self.plate.get_pixel(x, y);
            (0..3).any(|c| a[c].abs_diff(b[c]) > self.threshold)
        }))
    }

    pub fn segment(&self, image: &RgbImage) -> Result<SegmentationOutput> {
        let fg = self.foreground(image)?;
        let dims = image.dimensions();
        let detections = connected_components(&fg)
            .into_iter()
            .filter(|c| c.count() >= self.min_component)
            .map(|mask| {
                let [x1, y1, x2, y2] = mask.bounding_box().expect("component is nonempty");
                Ok(Detection {
                    bbox: BoundingBox::new(x1, y1, x2, y2, dims)?,
                    mask,
                    label: "component".into(),
                    score: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentationOutput {
            detections,
            source_dims: dims,
        })
    }
}

/// 8-connected components of the foreground, ordered by their first pixel in
/// raster order.
pub fn connected_components(fg: &Mask) -> Vec<Mask> {
    let (w, h) = fg.dims();
    let mut seen = Mask::new(w, h);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !fg.get(x0, y0) || seen.get(x0, y0) {
                continue;
            }
            let mut comp = Mask::new(w, h);
            seen.set(x0, y0, true);
            stack.push((x0, y0));
            while let Some((x, y)) = stack.pop() {
                comp.set(x, y, true);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        if fg.get(nx, ny) && !seen.get(nx, ny) {
                            seen.set(nx, ny, true);
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Largest box area wins; the first detection wins ties.
pub fn select_primary_detection(output: &SegmentationOutput) -> Option<&Detection> {
    let mut best: Option<&Detection> = None;
    for d in &output.detections {
        if best.is_none_or(|b| d.bbox.area() > b.bbox.area()) {
            best = Some(d);
        }
    }
    best
}

/// Cuts the detection's box out of `image`, zeroing pixels outside its mask.
pub fn crop_with_mask(image: &RgbImage, detection: &Detection) -> Result<RgbImage> {
    let dims = image.dimensions();
    let b = detection.bbox;
    BoundingBox::new(b.x1, b.y1, b.x2, b.y2, dims)?;
    if detection.mask.dims() != dims {
        return Err(Error::InvalidDetection("mask does not match image".into()));
    }
    Ok(RgbImage::from_fn(b.width(), b.height(), |x, y| {
        let (sx, sy) = (x + b.x1, y + b.y1);
        if detection.mask.get(sx, sy) {
            *image.get_pixel(sx, sy)
        } else {
            Rgb([0, 0, 0])
        }
    }))
}

/// Stage-2 output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRegion {
    pub image: RgbImage,
    /// Crop-space mask; `None` when the whole image is used unmasked.
    pub mask: Option<Mask>,
    /// Position of the crop's origin in the source image.
    pub offset: (u32, u32),
    pub fallback: bool,
}

impl PreparedRegion {
    pub fn unmasked(image: RgbImage) -> Self {
        PreparedRegion {
            image,
            mask: None,
            offset: (0, 0),
            fallback: false,
        }
    }
}

pub fn prepare_region(provider: &SegmenterProvider, input: ImageInput<'_>) -> Result<PreparedRegion> {
    prepare_region_with_margin(provider, input, 0)
}

/// As [`prepare_region`], with the crop box grown by `margin` pixels on
/// each side (clamped to the image). The extra pixels are off-mask, so they
/// are black; the margin only keeps features near the product outline
/// clear of the crop border.
pub fn prepare_region_with_margin(
    provider: &SegmenterProvider,
    input: ImageInput<'_>,
    margin: u32,
) -> Result<PreparedRegion> {
    let output = provider.segment(input)?;
    let (w, h) = input.image.dimensions();
    Ok(match select_primary_detection(&output) {
        Some(det) => {
            let b = det.bbox;
            let grown = Detection {
                bbox: BoundingBox::new(
                    b.x1.saturating_sub(margin),
                    b.y1.saturating_sub(margin),
                    b.x2.saturating_add(margin).min(w),
                    b.y2.saturating_add(margin).min(h),
                    (w, h),
                )?,
                ..det.clone()
            };
            let g = grown.bbox;
            PreparedRegion {
                image: crop_with_mask(input.image, &grown)?,
                mask: Some(grown.mask.crop(g.x1, g.y1, g.x2, g.y2)),
                offset: (g.x1, g.y1),
                fallback: false,
            }
        }
        None => PreparedRegion {
            image: input.image.clone(),
            mask: None,
            offset: (0, 0),
            fallback: true,
        },
    })
}
