//! RANSAC homography verification.
//!
//! Models are scored by inlier count (`‖H·p − p′‖ < threshold`), with ties
//! going to the lower summed inlier error. The iteration budget shrinks
//! adaptively to the number of draws needed for `confidence` at the best
//! inlier ratio so far. Exhaustive sampling enumerates every 4-subset in
//! lexicographic order instead of drawing at random.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureSet;

use super::homography::{fit_homography, is_degenerate_sample, Homography};
use super::MatchSet;

const MIN_SAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Random,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub sampling: Sampling,
    /// Re-fit on the consensus set after sampling, keeping the re-fit only
    /// when it scores at least as well.
    pub refine: bool,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            threshold_px: 3.0,
            max_iters: 2000,
            confidence: 0.99,
            sampling: Sampling::Random,
            refine: true,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_px > 0.0) || !self.threshold_px.is_finite() {
            return Err(Error::InvalidParameter("threshold_px must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidParameter("confidence must be in (0, 1)".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Consensus for one model.
#[derive(Debug, Clone)]
pub struct Consensus {
    pub model: Homography,
    pub inliers: Vec<bool>,
    pub count: usize,
    pub error_sum: f64,
}

impl Consensus {
    fn evaluate(model: Homography, src: &[(f64, f64)], dst: &[(f64, f64)], threshold: f64) -> Self {
        let mut inliers = Vec::with_capacity(src.len());
        let (mut count, mut error_sum) = (0, 0.0);
        for (p, q) in src.iter().zip(dst) {
            let e = model.reprojection_error(*p, *q);
            let ok = e < threshold;
            inliers.push(ok);
            if ok {
                count += 1;
                error_sum += e;
            }
        }
        Consensus {
            model,
            inliers,
            count,
            error_sum,
        }
    }

    fn beats(&self, other: &Consensus) -> bool {
        self.count > other.count || (self.count == other.count && self.error_sum < other.error_sum)
    }
}

/// Draws needed to hit an all-inlier minimal sample with probability
/// `confidence` at inlier ratio `w`.
pub fn adaptive_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    let p_good = w.powi(MIN_SAMPLE as i32);
    if p_good <= 0.0 {
        return cap;
    }
    if p_good >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil().max(1.0) as usize).min(cap)
}

/// Robust homography over point correspondences.
pub fn ransac_points(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    params: &RansacParams,
    seed: u64,
) -> Result<Option<Consensus>> {
    params.validate()?;
    assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < MIN_SAMPLE {
        return Ok(None);
    }

    let mut best: Option<Consensus> = None;
    let try_sample = |idx: [usize; 4], best: &mut Option<Consensus>| -> bool {
        let s = idx.map(|i| src[i]);
        let d = idx.map(|i| dst[i]);
        if is_degenerate_sample(&s) || is_degenerate_sample(&d) {
            return false;
        }
        if let Some(h) = fit_homography(&s, &d) {
            let c = Consensus::evaluate(h, src, dst, params.threshold_px);
            if best.as_ref().is_none_or(|b| c.beats(b)) {
                *best = Some(c);
            }
        }
        true
    };

    match params.sampling {
        Sampling::Exhaustive => {
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        for d in c + 1..n {
                            try_sample([a, b, c, d], &mut best);
                        }
                    }
                }
            }
        }
        Sampling::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut limit = params.max_iters;
            let mut iters = 0;
            let mut degenerate = 0;
            while iters < limit {
                let picked = sample(&mut rng, n, MIN_SAMPLE);
                let idx = [picked.index(0), picked.index(1), picked.index(2), picked.index(3)];
                if !try_sample(idx, &mut best) {
                    degenerate += 1;
                    if degenerate > params.max_iters {
                        break;
                    }
                    continue;
                }
                iters += 1;
                if let Some(b) = &best {
                    limit = adaptive_iterations(b.count as f64 / n as f64, params.confidence, params.max_iters);
                }
            }
        }
    }

    if params.refine {
        if let Some(mut current) = best.take() {
            for _ in 0..5 {
                let (s, d): (Vec<_>, Vec<_>) = current
                    .inliers
                    .iter()
                    .enumerate()
                    .filter(|(_, &ok)| ok)
                    .map(|(i, _)| (src[i], dst[i]))
                    .unzip();
                let Some(h) = fit_homography(&s, &d) else { break };
                let c = Consensus::evaluate(h, src, dst, params.threshold_px);
                if !c.beats(&current) {
                    break;
                }
                current = c;
            }
            best = Some(current);
        }
    }
    Ok(best)
}

/// Verifies correspondences between two feature sets and attaches inlier
/// flags and the winning model.
pub fn ransac_verify(
    matches: &MatchSet,
    a: &FeatureSet,
    b: &FeatureSet,
    params: &RansacParams,
    seed: u64,
) -> Result<MatchSet> {
    let mut src = Vec::with_capacity(matches.correspondences.len());
    let mut dst = Vec::with_capacity(matches.correspondences.len());
    for c in &matches.correspondences {
        let (ka, kb) = (
            a.keypoints.get(c.query_idx).ok_or_else(|| bad_index(c.query_idx))?,
            b.keypoints.get(c.gallery_idx).ok_or_else(|| bad_index(c.gallery_idx))?,
        );
        src.push((ka.x as f64, ka.y as f64));
        dst.push((kb.x as f64, kb.y as f64));
    }
    let outcome = ransac_points(&src, &dst, params, seed)?;
    let mut out = matches.clone();
    match outcome {
        Some(c) => {
            out.inlier_flags = Some(c.inliers);
            out.model = Some(c.model);
        }
        None => {
            out.inlier_flags = Some(vec![false; src.len()]);
            out.model = None;
        }
    }
    Ok(out)
}

fn bad_index(i: usize) -> Error {
    Error::InvalidParameter(format!("correspondence index {i} out of range"))
}

/// Per-pair RANSAC seed, independent of scheduling order.
pub fn pair_seed(query_id: &str, gallery_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update((query_id.len() as u64).to_le_bytes());
    h.update(query_id.as_bytes());
    h.update(gallery_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
