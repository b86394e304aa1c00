//! Keypoints and local descriptors.
//!
//! The reference backend is a Harris corner detector (Sobel gradients,
//! Gaussian structure-tensor window, 3×3 non-maximum suppression) paired with
//! an 8×8 intensity patch descriptor sampled at 2 px spacing, mean-subtracted
//! and L2-normalized (D = 64).

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{to_gray_f32, Mask};
use crate::remote::RemoteClient;

pub const DESCRIPTOR_LEN: usize = 64;
const PATCH_SAMPLES: usize = 8;
const PATCH_SPACING: f32 = 2.0;
/// Half-extent of the descriptor patch in pixels.
const PATCH_RADIUS: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub response: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    /// Row-major `keypoints.len() × dim`.
    pub descriptors: Vec<f32>,
    pub dim: usize,
    /// Set when the image was smaller than the detector window.
    pub too_small: bool,
}

impl FeatureSet {
    pub fn empty(dim: usize) -> Self {
        FeatureSet {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    /// Builds a set from raw descriptor rows, normalizing each row.
    pub fn from_rows(keypoints: Vec<Keypoint>, rows: &[Vec<f32>]) -> Result<Self> {
        if keypoints.len() != rows.len() {
            return Err(Error::InvalidParameter(format!(
                "{} keypoints but {} descriptors",
                keypoints.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut descriptors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DescriptorLength(dim, r.len()));
            }
            let norm = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::InvalidParameter("descriptor has zero norm".into()));
            }
            descriptors.extend(r.iter().map(|v| v / norm));
        }
        Ok(FeatureSet {
            keypoints,
            descriptors,
            dim,
            too_small: false,
        })
    }

    /// Shifts every keypoint by `(dx, dy)`.
    pub fn translated(mut self, dx: f32, dy: f32) -> Self {
        for k in &mut self.keypoints {
            k.x += dx;
            k.y += dy;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarrisConfig {
    pub sigma: f32,
    pub k: f32,
    /// Minimum corner response (intensities scaled to `[0, 1]`).
    pub threshold: f32,
    /// Smoothing applied before descriptor sampling.
    pub descriptor_sigma: f32,
}

impl Default for HarrisConfig {
    fn default() -> Self {
        HarrisConfig {
            sigma: 1.5,
            k: 0.04,
            threshold: 1e-6,
            descriptor_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureConfig {
    Reference {
        #[serde(default)]
        harris: HarrisConfig,
    },
    Remote,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig::Reference {
            harris: HarrisConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FeatureProvider {
    Reference(HarrisConfig),
    Remote(Arc<RemoteClient>),
}

impl Default for FeatureProvider {
    fn default() -> Self {
        FeatureProvider::Reference(HarrisConfig::default())
    }
}

impl FeatureProvider {
    pub fn from_config(cfg: &FeatureConfig, remote: Option<&Arc<RemoteClient>>) -> Result<Self> {
        Ok(match cfg {
            FeatureConfig::Reference { harris } => FeatureProvider::Reference(*harris),
            FeatureConfig::Remote => FeatureProvider::Remote(
                remote
                    .cloned()
                    .ok_or_else(|| Error::Config("remote feature extractor without endpoint".into()))?,
            ),
        })
    }

    /// Extracts at most `max_keypoints` features, strongest first. With a
    /// mask, keypoints whose pixel is background are discarded.
    pub fn extract(&self, image: &RgbImage, mask: Option<&Mask>, max_keypoints: usize) -> Result<FeatureSet> {
        if max_keypoints == 0 {
            return Err(Error::InvalidParameter("max_keypoints must be at least 1".into()));
        }
        if let Some(m) = mask {
            if m.dims() != image.dimensions() {
                return Err(Error::InvalidParameter("mask does not match image".into()));
            }
        }
        match self {
            FeatureProvider::Reference(cfg) => Ok(extract_reference(image, mask, max_keypoints, cfg)),
            FeatureProvider::Remote(client) => {
                let mut fs = client.features(image)?;
                let (w, h) = image.dimensions();
                if fs
                    .keypoints
                    .iter()
                    .any(|k| !(k.x >= 0.0 && k.y >= 0.0 && k.x < w as f32 && k.y < h as f32))
                {
                    return Err(crate::error::RemoteError::Schema("keypoint outside image".into()).into());
                }
                if let Some(m) = mask {
                    let keep: Vec<usize> = (0..fs.len())
                        .filter(|&i| m.contains_point(fs.keypoints[i].x, fs.keypoints[i].y))
                        .collect();
                    fs = subset(&fs, &keep);
                }
                fs.keypoints.truncate(max_keypoints);
                fs.descriptors.truncate(fs.keypoints.len() * fs.dim);
                Ok(fs)
            }
        }
    }
}

fn subset(fs: &FeatureSet, keep: &[usize]) -> FeatureSet {
    FeatureSet {
        keypoints: keep.iter().map(|&i| fs.keypoints[i]).collect(),
        descriptors: keep.iter().flat_map(|&i| fs.descriptor(i).iter().copied()).collect(),
        dim: fs.dim,
        too_small: fs.too_small,
    }
}

/// Row-major single-channel float plane.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.data[yc * self.w + xc]
    }

    /// Bilinear sample with edge clamping.
    fn sample(&self, x: f32, y: f32) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.at(xi, yi) * (1.0 - fx) + self.at(xi + 1, yi) * fx;
        let bottom = self.at(xi, yi + 1) * (1.0 - fx) + self.at(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn blur(p: &Plane, sigma: f32) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p.at(x as isize + i as isize - r, y as isize))
                .sum();
        }
    }
    let tmp = Plane {
        w: p.w,
        h: p.h,
        data: tmp,
    };
    let mut out = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp.at(x as isize, y as isize + i as isize - r))
                .sum();
        }
    }
    Plane {
        w: p.w,
        h: p.h,
        data: out,
    }
}

/// Harris response `det(M) − k·trace(M)²` for every pixel.
fn harris_response(gray: &Plane, cfg: &HarrisConfig) -> Plane {
    let (w, h) = (gray.w, gray.h);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let g = |dx, dy| gray.at(x + dx, y + dy);
            let gx = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1) - g(-1, -1) - 2.0 * g(-1, 0) - g(-1, 1)) / 8.0;
            let gy = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1) - g(-1, -1) - 2.0 * g(0, -1) - g(1, -1)) / 8.0;
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let plane = |data| Plane { w, h, data };
    let sxx = blur(&plane(ixx), cfg.sigma);
    let syy = blur(&plane(iyy), cfg.sigma);
    let sxy = blur(&plane(ixy), cfg.sigma);
    let data = (0..w * h)
        .map(|i| {
            let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
            a * b - c * c - cfg.k * (a + b) * (a + b)
        })
        .collect();
    plane(data)
}

/// Offset of the vertex of the parabola through three samples, in `[-0.5, 0.5]`.
fn parabolic_offset(l: f32, c: f32, r: f32) -> f32 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < f32::EPSILON {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

fn describe(smooth: &Plane, x: f32, y: f32) -> Option<[f32; DESCRIPTOR_LEN]> {
    let mut d = [0.0f32; DESCRIPTOR_LEN];
    let start = -(PATCH_SAMPLES as f32 - 1.0) * PATCH_SPACING / 2.0;
    for j in 0..PATCH_SAMPLES {
        for i in 0..PATCH_SAMPLES {
            d[j * PATCH_SAMPLES + i] = smooth.sample(
                x + start + i as f32 * PATCH_SPACING,
                y + start + j as f32 * PATCH_SPACING,
            );
        }
    }
    let mean = d.iter().sum::<f32>() / DESCRIPTOR_LEN as f32;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

pub fn extract_reference(
    image: &RgbImage,
    mask: Option<&Mask>,
    max_keypoints: usize,
    cfg: &HarrisConfig,
) -> FeatureSet {
    let (w, h) = image.dimensions();
    let margin = PATCH_RADIUS;
    if w < 2 * margin + 1 || h < 2 * margin + 1 {
        return FeatureSet {
            too_small: true,
            ..FeatureSet::empty(DESCRIPTOR_LEN)
        };
    }
    let gray = Plane {
        w: w as usize,
        h: h as usize,
        data: to_gray_f32(image),
    };
    let resp = harris_response(&gray, cfg);
    let r = |x: u32, y: u32| resp.data[y as usize * resp.w + x as usize];

    let mut candidates = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let v = r(x, y);
            if v <= cfg.threshold {
                continue;
            }
            // A plateau keeps only its first pixel in raster order.
            let is_max = (-1i32..=1).all(|dy| {
                (-1i32..=1).all(|dx| {
                    if dx == 0 && dy == 0 {
                        return true;
                    }
                    let n = r((x as i32 + dx) as u32, (y as i32 + dy) as u32);
                    if dy < 0 || (dy == 0 && dx < 0) {
                        v > n
                    } else {
                        v >= n
                    }
                })
            });
            if !is_max {
                continue;
            }
            let kx = x as f32 + parabolic_offset(r(x - 1, y), v, r(x + 1, y));
            let ky = y as f32 + parabolic_offset(r(x, y - 1), v, r(x, y + 1));
            if let Some(m) = mask {
                if !m.contains_point(kx, ky) {
                    continue;
                }
            }
            candidates.push(Keypoint {
                x: kx,
                y: ky,
                response: v,
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });

    let smooth = blur(&gray, cfg.descriptor_sigma);
    let mut out = FeatureSet::empty(DESCRIPTOR_LEN);
    for kp in candidates {
        if out.keypoints.len() >= max_keypoints {
            break;
        }
        if let Some(d) = describe(&smooth, kp.x, kp.y) {
            out.keypoints.push(kp);
            out.descriptors.extend_from_slice(&d);
        }
    }
    out
}
