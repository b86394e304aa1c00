//! HTTP adapters for externally served models.
//!
//! Every endpoint is a POST under one base URL:
//!
//! | path        | request                         | response                                   |
//! |-------------|---------------------------------|--------------------------------------------|
//! | `/embed`    | PNG bytes                       | `[f32; dim]`                               |
//! | `/segment`  | PNG bytes                       | `[{box, label, score, mask_rle}]`          |
//! | `/features` | PNG bytes                       | `{keypoints: [[x,y]], descriptors: [[..]]}`|
//! | `/match`    | `{desc_a, desc_b, kpts_a, kpts_b}` | `{matches: [[i,j]]}`                    |
//!
//! Responses are validated in full before anything is returned; a malformed
//! response is rejected, never partially accepted. Geometric verification
//! always runs locally on returned matches.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{RemoteError, Result};
use crate::features::{FeatureSet, Keypoint};
use crate::matching::{Correspondence, MatchSet};
use crate::raster::{encode_png_rgb, Mask};
use crate::segmentation::{BoundingBox, Detection, SegmentationOutput};

pub const REMOTE_URL_ENV: &str = "SHELFMATCH_REMOTE_URL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub auth_token: Option<String>,
    /// Maximum concurrent requests.
    pub max_in_flight: usize,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: String::new(),
            timeout_ms: 10_000,
            retries: 2,
            auth_token: None,
            max_in_flight: 8,
            backoff_ms: 50,
        }
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            ..Default::default()
        }
    }

    /// Fills an empty base URL from `SHELFMATCH_REMOTE_URL`.
    pub fn with_env_fallback(mut self) -> Self {
        if self.base_url.is_empty() {
            if let Ok(url) = std::env::var(REMOTE_URL_ENV) {
                self.base_url = url;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), RemoteError> {
        if self.base_url.is_empty() {
            return Err(RemoteError::NoEndpoint);
        }
        if self.timeout_ms == 0 || self.max_in_flight == 0 {
            return Err(RemoteError::Schema(
                "timeout_ms and max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteClient {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    permits: Permits,
}

impl RemoteClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteClient {
            permits: Permits {
                free: Mutex::new(cfg.max_in_flight),
                cv: Condvar::new(),
            },
            agent,
            cfg,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, content_type: &str, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
        let mut req = self.agent.post(url).header("Content-Type", content_type);
        if let Some(token) = &self.cfg.auth_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => RemoteError::Timeout { attempts: 1 },
            other => RemoteError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(RemoteError::Http { status });
        }
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => RemoteError::Timeout { attempts: 1 },
                other => RemoteError::Transport(other.to_string()),
            })
    }

    /// POST with retries and exponential backoff. Client errors (4xx) are
    /// not retried.
    fn post(&self, path: &str, content_type: &str, body: &[u8]) -> Result<Vec<u8>, RemoteError> {
        let url = self.url(path);
        let _permit = self.permits.acquire();
        let attempts = self.cfg.retries + 1;
        let mut last = RemoteError::NoEndpoint;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1).min(16)));
            }
            match self.attempt(&url, content_type, body) {
                Ok(bytes) => return Ok(bytes),
                Err(RemoteError::Http { status }) if (400..500).contains(&status) => {
                    return Err(RemoteError::Http { status })
                }
                Err(e) => last = e,
            }
        }
        Err(match last {
            RemoteError::Timeout { .. } => RemoteError::Timeout { attempts },
            other => other,
        })
    }

    fn post_json<T: for<'de> Deserialize<'de>>(&self, path: &str, content_type: &str, body: &[u8]) -> Result<T, RemoteError> {
        let bytes = self.post(path, content_type, body)?;
        serde_json::from_slice(&bytes).map_err(|e| RemoteError::Schema(e.to_string()))
    }

    /// Response vector is re-normalized locally.
    pub fn embed(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        let values: Vec<f32> = self.post_json("embed", "image/png", &encode_png_rgb(image))?;
        EmbeddingVector::new(values).map_err(|e| RemoteError::Schema(e.to_string()).into())
    }

    pub fn segment(&self, image: &RgbImage) -> Result<SegmentationOutput> {
        let raw: Vec<WireDetection> = self.post_json("segment", "image/png", &encode_png_rgb(image))?;
        decode_segmentation(raw, image.dimensions()).map_err(Into::into)
    }

    pub fn features(&self, image: &RgbImage) -> Result<FeatureSet> {
        let raw: WireFeatures = self.post_json("features", "image/png", &encode_png_rgb(image))?;
        decode_features(raw).map_err(Into::into)
    }

    pub fn match_features(&self, a: &FeatureSet, b: &FeatureSet) -> Result<MatchSet> {
        let req = WireMatchRequest {
            desc_a: rows(a),
            desc_b: rows(b),
            kpts_a: a.keypoints.iter().map(|k| [k.x, k.y]).collect(),
            kpts_b: b.keypoints.iter().map(|k| [k.x, k.y]).collect(),
        };
        let body = serde_json::to_vec(&req).expect("request serializes");
        let raw: WireMatches = self.post_json("match", "application/json", &body)?;
        decode_matches(raw, a, b).map_err(Into::into)
    }
}

fn rows(fs: &FeatureSet) -> Vec<Vec<f32>> {
    (0..fs.len()).map(|i| fs.descriptor(i).to_vec()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireDetection {
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub label: String,
    pub score: f32,
    /// One entry per image row, each a list of `[start, len]` runs.
    pub mask_rle: Vec<Vec<[u32; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireFeatures {
    pub keypoints: Vec<[f32; 2]>,
    pub descriptors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMatchRequest {
    pub desc_a: Vec<Vec<f32>>,
    pub desc_b: Vec<Vec<f32>>,
    pub kpts_a: Vec<[f32; 2]>,
    pub kpts_b: Vec<[f32; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMatches {
    pub matches: Vec<[usize; 2]>,
}

/// Row-wise run-length encoding of a mask.
pub fn encode_rle(mask: &Mask) -> Vec<Vec<[u32; 2]>> {
    (0..mask.height())
        .map(|y| {
            let mut runs = Vec::new();
            let mut x = 0;
            while x < mask.width() {
                if mask.get(x, y) {
                    let start = x;
                    while x < mask.width() && mask.get(x, y) {
                        x += 1;
                    }
                    runs.push([start, x - start]);
                } else {
                    x += 1;
                }
            }
            runs
        })
        .collect()
}

pub fn decode_rle(rle: &[Vec<[u32; 2]>], dims: (u32, u32)) -> Result<Mask, RemoteError> {
    if rle.len() != dims.1 as usize {
        return Err(RemoteError::Schema(format!(
            "mask has {} rows, image has {}",
            rle.len(),
            dims.1
        )));
    }
    let mut mask = Mask::new(dims.0, dims.1);
    for (y, runs) in rle.iter().enumerate() {
        for &[start, len] in runs {
            let end = start.checked_add(len).filter(|&e| e <= dims.0).ok_or_else(|| {
                RemoteError::Schema(format!("run [{start}, {len}] exceeds width {}", dims.0))
            })?;
            for x in start..end {
                mask.set(x, y as u32, true);
            }
        }
    }
    Ok(mask)
}

fn decode_segmentation(raw: Vec<WireDetection>, dims: (u32, u32)) -> Result<SegmentationOutput, RemoteError> {
    let schema = |e: crate::error::Error| RemoteError::Schema(e.to_string());
    let mut detections = Vec::with_capacity(raw.len());
    for d in raw {
        let [x1, y1, x2, y2] = d.bbox;
        let det = Detection {
            bbox: BoundingBox::new(x1, y1, x2, y2, dims).map_err(schema)?,
            mask: decode_rle(&d.mask_rle, dims)?,
            label: d.label,
            score: d.score,
        };
        det.validate(dims).map_err(schema)?;
        detections.push(det);
    }
    Ok(SegmentationOutput {
        detections,
        source_dims: dims,
    })
}

fn decode_features(raw: WireFeatures) -> Result<FeatureSet, RemoteError> {
    let keypoints: Vec<Keypoint> = raw
        .keypoints
        .iter()
        .enumerate()
        .map(|(i, &[x, y])| Keypoint {
            x,
            y,
            response: (raw.keypoints.len() - i) as f32,
        })
        .collect();
    if keypoints.iter().any(|k| !k.x.is_finite() || !k.y.is_finite()) {
        return Err(RemoteError::Schema("non-finite keypoint".into()));
    }
    FeatureSet::from_rows(keypoints, &raw.descriptors).map_err(|e| RemoteError::Schema(e.to_string()))
}

fn decode_matches(raw: WireMatches, a: &FeatureSet, b: &FeatureSet) -> Result<MatchSet, RemoteError> {
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::with_capacity(raw.matches.len());
    for [i, j] in raw.matches {
        if i >= a.len() || j >= b.len() {
            return Err(RemoteError::Schema(format!("match [{i}, {j}] out of range")));
        }
        if std::mem::replace(&mut used_a[i], true) || std::mem::replace(&mut used_b[j], true) {
            return Err(RemoteError::Schema(format!("keypoint reused in match [{i}, {j}]")));
        }
        let distance = a
            .descriptor(i)
            .iter()
            .zip(b.descriptor(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt();
        out.push(Correspondence {
            query_idx: i,
            gallery_idx: j,
            distance,
        });
    }
    Ok(MatchSet::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip_and_validation() {
        let m = Mask::from_fn(7, 4, |x, y| (x + y) % 3 != 0 || x == 6);
        let rle = encode_rle(&m);
        assert_eq!(decode_rle(&rle, (7, 4)).unwrap(), m);
        assert!(decode_rle(&rle, (7, 5)).is_err());
        assert!(decode_rle(&[vec![[5, 3]]], (7, 1)).is_err());
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            EndpointConfig::default().validate(),
            Err(RemoteError::NoEndpoint)
        );
        let cfg = EndpointConfig {
            timeout_ms: 0,
            ..EndpointConfig::new("http://x")
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn match_indices_validated() {
        let fs = FeatureSet::from_rows(
            vec![Keypoint { x: 0.0, y: 0.0, response: 1.0 }],
            &[vec![1.0, 0.0]],
        )
        .unwrap();
        assert!(decode_matches(WireMatches { matches: vec![[0, 1]] }, &fs, &fs).is_err());
        assert_eq!(decode_matches(WireMatches { matches: vec![[0, 0]] }, &fs, &fs).unwrap().len(), 1);
    }
}
