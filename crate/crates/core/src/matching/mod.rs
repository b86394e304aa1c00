//! Stage 3: descriptor correspondence and geometric verification.

mod homography;
mod ransac;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use homography::{fit_homography, is_degenerate_sample, Homography};
pub use ransac::{adaptive_iterations, pair_seed, ransac_points, ransac_verify, Consensus, RansacParams, Sampling};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::remote::RemoteClient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub query_idx: usize,
    pub gallery_idx: usize,
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub correspondences: Vec<Correspondence>,
    pub inlier_flags: Option<Vec<bool>>,
    pub model: Option<Homography>,
}

impl MatchSet {
    pub fn new(correspondences: Vec<Correspondence>) -> Self {
        MatchSet {
            correspondences,
            inlier_flags: None,
            model: None,
        }
    }

    pub fn len(&self) -> usize {
        self.correspondences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }
}

/// Number of flagged inliers; zero when verification has not run.
pub fn inlier_count(matches: &MatchSet) -> usize {
    matches
        .inlier_flags
        .as_ref()
        .map_or(0, |f| f.iter().filter(|&&b| b).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatcherConfig {
    /// Mutual nearest neighbours passing the ratio test.
    Reference {
        #[serde(default = "default_ratio")]
        ratio: f32,
    },
    /// Ratio test alone, without the mutual check.
    RatioOnly {
        #[serde(default = "default_ratio")]
        ratio: f32,
    },
    Remote,
}

/// Nearest / second-nearest distance ratio above which a match is dropped.
pub const DEFAULT_RATIO: f32 = 0.8;

fn default_ratio() -> f32 {
    DEFAULT_RATIO
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig::Reference {
            ratio: default_ratio(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum MatcherProvider {
    Reference { ratio: f32, mutual: bool },
    Remote(Arc<RemoteClient>),
}

impl Default for MatcherProvider {
    fn default() -> Self {
        MatcherProvider::Reference {
            ratio: default_ratio(),
            mutual: true,
        }
    }
}

impl MatcherProvider {
    pub fn from_config(cfg: &MatcherConfig, remote: Option<&Arc<RemoteClient>>) -> Result<Self> {
        Ok(match *cfg {
            MatcherConfig::Reference { ratio } => MatcherProvider::Reference { ratio, mutual: true },
            MatcherConfig::RatioOnly { ratio } => MatcherProvider::Reference { ratio, mutual: false },
            MatcherConfig::Remote => MatcherProvider::Remote(
                remote
                    .cloned()
                    .ok_or_else(|| Error::Config("remote matcher without endpoint".into()))?,
            ),
        })
    }

    pub fn match_descriptors(&self, a: &FeatureSet, b: &FeatureSet) -> Result<MatchSet> {
        if a.is_empty() || b.is_empty() {
            return Ok(MatchSet::default());
        }
        if a.dim != b.dim {
            return Err(Error::DescriptorLength(a.dim, b.dim));
        }
        match self {
            MatcherProvider::Reference { ratio, mutual } => Ok(match_nearest(a, b, *ratio, *mutual)),
            MatcherProvider::Remote(client) => client.match_features(a, b),
        }
    }
}

/// Nearest and second-nearest squared distances from each row of `a` to `b`.
struct Neighbours {
    best: usize,
    d1: f32,
    d2: f32,
}

/// Brute-force L2 matching. A pair is kept when its distance ratio to the
/// second-nearest candidate is below `ratio` and, with `mutual`, when each
/// descriptor is the other's nearest neighbour.
pub fn match_nearest(a: &FeatureSet, b: &FeatureSet, ratio: f32, mutual: bool) -> MatchSet {
    // Direct differences, not the norm expansion: identical descriptors
    // must be exactly 0 apart.
    let mut dist = vec![0.0f32; a.len() * b.len()];
    for i in 0..a.len() {
        let da = a.descriptor(i);
        let row = &mut dist[i * b.len()..(i + 1) * b.len()];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = da.iter().zip(b.descriptor(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    let forward: Vec<Neighbours> = (0..a.len())
        .map(|i| {
            let mut n = Neighbours {
                best: 0,
                d1: f32::INFINITY,
                d2: f32::INFINITY,
            };
            for (j, &d) in dist[i * b.len()..(i + 1) * b.len()].iter().enumerate() {
                if d < n.d1 {
                    n.d2 = n.d1;
                    n.d1 = d;
                    n.best = j;
                } else if d < n.d2 {
                    n.d2 = d;
                }
            }
            n
        })
        .collect();
    let backward: Vec<usize> = if mutual {
        (0..b.len())
            .map(|j| {
                let mut best = (0, f32::INFINITY);
                for i in 0..a.len() {
                    let d = dist[i * b.len() + j];
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, n) in forward.iter().enumerate() {
        if mutual && backward[n.best] != i {
            continue;
        }
        // Compare distances, not squared distances.
        let passes = n.d2.is_infinite() || n.d1.sqrt() < ratio * n.d2.sqrt();
        if !passes || used_b[n.best] {
            continue;
        }
        used_b[n.best] = true;
        out.push(Correspondence {
            query_idx: i,
            gallery_idx: n.best,
            distance: n.d1.sqrt(),
        });
    }
    MatchSet::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;
    use proptest::prelude::*;

    fn kp(i: usize) -> Keypoint {
        Keypoint {
            x: i as f32,
            y: 0.0,
            response: 1.0,
        }
    }

    fn set(rows: Vec<Vec<f32>>) -> FeatureSet {
        FeatureSet::from_rows((0..rows.len()).map(kp).collect(), &rows).unwrap()
    }

    fn basis(dim: usize, i: usize) -> Vec<f32> {
        (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn self_match_is_identity() {
        let a = set((0..10).map(|i| basis(16, i)).collect());
        let m = MatcherProvider::default().match_descriptors(&a, &a).unwrap();
        assert_eq!(m.len(), 10);
        assert!(m.correspondences.iter().all(|c| c.query_idx == c.gallery_idx));
    }

    #[test]
    fn empty_inputs() {
        let a = set(vec![basis(4, 0)]);
        let e = FeatureSet::empty(4);
        assert!(MatcherProvider::default().match_descriptors(&a, &e).unwrap().is_empty());
        assert!(MatcherProvider::default().match_descriptors(&e, &a).unwrap().is_empty());
    }

    #[test]
    fn descriptor_length_mismatch() {
        let a = set(vec![basis(4, 0)]);
        let b = set(vec![basis(8, 0)]);
        assert!(matches!(
            MatcherProvider::default().match_descriptors(&a, &b),
            Err(Error::DescriptorLength(4, 8))
        ));
    }

    #[test]
    fn equidistant_pair_is_rejected() {
        // q0 = e0 is at distance sqrt(2 - sqrt(2)) from both g0 and g1.
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let mut g0 = vec![0.0; 8];
        g0[0] = s;
        g0[1] = s;
        let mut g1 = vec![0.0; 8];
        g1[0] = s;
        g1[2] = s;
        let q = set(vec![basis(8, 0), basis(8, 5)]);
        let g = set(vec![g0, g1, basis(8, 5)]);
        let m = MatcherProvider::default().match_descriptors(&q, &g).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m.correspondences[0].query_idx, m.correspondences[0].gallery_idx), (1, 2));
    }

    #[test]
    fn inlier_count_cases() {
        let mut m = MatchSet::new(vec![]);
        assert_eq!(inlier_count(&m), 0);
        m.inlier_flags = Some(vec![true, true, false, true]);
        assert_eq!(inlier_count(&m), 3);
        m.inlier_flags = Some(vec![true; 494]);
        assert_eq!(inlier_count(&m), 494);
    }

    proptest! {
        #[test]
        fn each_keypoint_used_at_most_once(
            rows_a in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 6), 1..20),
            rows_b in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 6), 1..20),
            mutual in any::<bool>(),
        ) {
            prop_assume!(rows_a.iter().chain(&rows_b).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let (a, b) = (set(rows_a), set(rows_b));
            let m = match_nearest(&a, &b, 0.8, mutual);
            let mut qa: Vec<_> = m.correspondences.iter().map(|c| c.query_idx).collect();
            let mut gb: Vec<_> = m.correspondences.iter().map(|c| c.gallery_idx).collect();
            qa.dedup();
            gb.sort();
            gb.dedup();
            prop_assert_eq!(qa.len(), m.len());
            prop_assert_eq!(gb.len(), m.len());
        }
    }
}
