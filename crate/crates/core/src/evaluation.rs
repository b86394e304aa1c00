//! Accuracy, latency and out-of-mask diagnostics over completed runs.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::CatalogManifest;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::matching::MatchSet;
use crate::pipeline::{Engine, QueryImage, QuerySpec, RetrievalResult};
use crate::raster::{load_mask, Mask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLabel {
    pub query_id: String,
    pub true_product_id: String,
}

/// One entry of a query list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub query_id: String,
    pub image: String,
    pub true_product_id: String,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub homography: Option<[f64; 9]>,
    #[serde(default)]
    pub occlusion_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub specs: Vec<QuerySpec>,
    pub labels: Vec<QueryLabel>,
    pub entries: Vec<QueryEntry>,
    /// Directory relative paths in `entries` are resolved against.
    pub base_dir: PathBuf,
}

impl QuerySet {
    pub fn mask_path(&self, idx: usize) -> Option<PathBuf> {
        self.entries[idx].mask.as_ref().map(|m| self.base_dir.join(m))
    }
}

/// Reads a query list. Paths are relative to the file; each query's coarse
/// class is taken from its labelled product.
pub fn load_queries(path: impl AsRef<Path>, catalog: &CatalogManifest) -> Result<QuerySet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<QueryEntry> =
        serde_json::from_slice(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{}: query list is empty", path.display())));
    }
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut seen = HashSet::new();
    let mut specs = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for e in &entries {
        if !seen.insert(e.query_id.as_str()) {
            return Err(Error::Dataset(format!("duplicate query_id {:?}", e.query_id)));
        }
        let product = catalog
            .product(&e.true_product_id)
            .ok_or_else(|| Error::UnknownProduct(e.true_product_id.clone()))?;
        specs.push(QuerySpec {
            id: e.query_id.clone(),
            image_path: base_dir.join(&e.image),
            mask_path: e.mask.as_ref().map(|m| base_dir.join(m)),
            class: Some(product.coarse_class),
        });
        labels.push(QueryLabel {
            query_id: e.query_id.clone(),
            true_product_id: e.true_product_id.clone(),
        });
    }
    Ok(QuerySet {
        specs,
        labels,
        entries,
        base_dir,
    })
}

/// Fraction of rankings whose labelled product is among the first `k`.
pub fn ranking_accuracy<'a>(
    rankings: impl IntoIterator<Item = (&'a str, Vec<&'a str>)>,
    labels: &[QueryLabel],
    k: usize,
) -> Result<f64> {
    let truth: HashMap<&str, &str> = labels
        .iter()
        .map(|l| (l.query_id.as_str(), l.true_product_id.as_str()))
        .collect();
    let (mut hits, mut n) = (0usize, 0usize);
    for (qid, ranked) in rankings {
        let t = truth
            .get(qid)
            .ok_or_else(|| Error::LabelMissing(qid.to_string()))?;
        n += 1;
        if ranked.iter().take(k).any(|p| p == t) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Dataset("no results to score".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Top-k accuracy of the final (re-ranked) lists.
pub fn top_k_accuracy(results: &[RetrievalResult], labels: &[QueryLabel], k: usize) -> Result<f64> {
    ranking_accuracy(
        results
            .iter()
            .map(|r| (r.query_id.as_str(), r.ranked.iter().map(|e| e.product_id.as_str()).collect())),
        labels,
        k,
    )
}

/// Top-k accuracy of the Stage-1 candidate order alone.
pub fn stage1_top_k_accuracy(results: &[RetrievalResult], labels: &[QueryLabel], k: usize) -> Result<f64> {
    ranking_accuracy(
        results.iter().map(|r| (r.query_id.as_str(), r.stage1_ranking())),
        labels,
        k,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize_latency(values: &[f64]) -> LatencySummary {
    if values.is_empty() {
        return LatencySummary::default();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    LatencySummary {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRatioRecord {
    pub query_id: String,
    pub out_mask: usize,
    pub in_mask: usize,
    pub ratio: f64,
}

/// Share of matches with at least one endpoint on background. Keypoints
/// must be in the coordinates of the masks' (un-cropped) images.
pub fn out_of_mask_ratio(
    query_id: &str,
    matches: &MatchSet,
    a: &FeatureSet,
    b: &FeatureSet,
    query_mask: &Mask,
    gallery_mask: &Mask,
) -> Result<MaskRatioRecord> {
    if matches.is_empty() {
        return Err(Error::NoMatches);
    }
    let mut in_mask = 0;
    for c in &matches.correspondences {
        let (ka, kb) = (a.keypoints[c.query_idx], b.keypoints[c.gallery_idx]);
        if query_mask.contains_point(ka.x, ka.y) && gallery_mask.contains_point(kb.x, kb.y) {
            in_mask += 1;
        }
    }
    let out_mask = matches.len() - in_mask;
    Ok(MaskRatioRecord {
        query_id: query_id.to_string(),
        out_mask,
        in_mask,
        ratio: out_mask as f64 / matches.len() as f64,
    })
}

/// Out-of-mask ratio of a query against its labelled product, as Stage 3
/// of `engine` sees both sides. Uses raw descriptor matches on the view
/// with the most of them (first in view order on ties); gallery ground
/// truth comes from the catalog masks.
pub fn mask_ratio_diagnostic(
    engine: &Engine,
    query: &QueryImage,
    true_product_id: &str,
    query_mask: &Mask,
) -> Result<MaskRatioRecord> {
    let product = engine
        .catalog()
        .product(true_product_id)
        .ok_or_else(|| Error::UnknownProduct(true_product_id.to_string()))?;
    let qf = engine.query_features_in_source(query)?;
    let mut best: Option<(MatchSet, FeatureSet, &Path)> = None;
    for v in &product.views {
        let mask_ref = v
            .mask_ref
            .as_deref()
            .ok_or_else(|| Error::MissingMask(v.image_id.clone()))?;
        let gf = engine.gallery_features_in_source(&v.image_id)?;
        let m = engine.raw_matches(&qf, &gf)?;
        if best.as_ref().is_none_or(|b| m.len() > b.0.len()) {
            best = Some((m, gf, mask_ref));
        }
    }
    let (m, gf, mask_ref) = best.ok_or(Error::NoMatches)?;
    let gallery_mask = load_mask(mask_ref)?;
    out_of_mask_ratio(&query.id, &m, &qf, &gf, query_mask, &gallery_mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Uniform bins over [0, 1]; each bin is `[lo, hi)` except the last,
/// which includes 1.
pub fn histogram(records: &[MaskRatioRecord], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for r in records {
        let idx = ((r.ratio.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        out[idx].count += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub top35: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLatency {
    pub stage1: LatencySummary,
    pub stage2: LatencySummary,
    pub stage3: LatencySummary,
    pub total: LatencySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: String,
    pub n_queries: usize,
    pub accuracy: Accuracy,
    pub latency_ms: StageLatency,
    pub mask_ratio_histogram: Vec<HistogramBin>,
    /// Diagnostic queries left out of the histogram for lack of matches.
    #[serde(default)]
    pub mask_ratio_skipped: usize,
    /// Queries that failed and are not counted in `n_queries`.
    #[serde(default)]
    pub failed_queries: usize,
}

impl MetricsReport {
    pub fn build(
        config: impl Into<String>,
        results: &[RetrievalResult],
        labels: &[QueryLabel],
        records: &[MaskRatioRecord],
        skipped: usize,
        bins: usize,
    ) -> Result<Self> {
        let lat = |f: fn(&RetrievalResult) -> f64| summarize_latency(&results.iter().map(f).collect::<Vec<_>>());
        Ok(MetricsReport {
            config: config.into(),
            n_queries: results.len(),
            accuracy: Accuracy {
                top1: top_k_accuracy(results, labels, 1)?,
                top5: top_k_accuracy(results, labels, 5)?,
                top35: top_k_accuracy(results, labels, 35)?,
            },
            latency_ms: StageLatency {
                stage1: lat(|r| r.timings.stage1),
                stage2: lat(|r| r.timings.stage2),
                stage3: lat(|r| r.timings.stage3),
                total: lat(|r| r.timings.total),
            },
            mask_ratio_histogram: histogram(records, bins)?,
            mask_ratio_skipped: skipped,
            failed_queries: 0,
        })
    }
}

/// Flattened per-query row for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub true_product_id: String,
    pub top1_product_id: String,
    pub true_rank: Option<usize>,
    pub stage1_rank: Option<usize>,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub stage3_ms: f64,
    pub total_ms: f64,
    pub mask_ratio: Option<f64>,
    pub flags: String,
}

pub fn query_rows(results: &[RetrievalResult], labels: &[QueryLabel], records: &[MaskRatioRecord]) -> Result<Vec<QueryRow>> {
    let truth: HashMap<&str, &str> = labels
        .iter()
        .map(|l| (l.query_id.as_str(), l.true_product_id.as_str()))
        .collect();
    let ratios: HashMap<&str, f64> = records.iter().map(|r| (r.query_id.as_str(), r.ratio)).collect();
    results
        .iter()
        .map(|r| {
            let t = *truth
                .get(r.query_id.as_str())
                .ok_or_else(|| Error::LabelMissing(r.query_id.clone()))?;
            Ok(QueryRow {
                query_id: r.query_id.clone(),
                true_product_id: t.to_string(),
                top1_product_id: r.ranked.first().map(|e| e.product_id.clone()).unwrap_or_default(),
                true_rank: r.ranked.iter().position(|e| e.product_id == t).map(|p| p + 1),
                stage1_rank: r.stage1_ranking().iter().position(|p| *p == t).map(|p| p + 1),
                stage1_ms: r.timings.stage1,
                stage2_ms: r.timings.stage2,
                stage3_ms: r.timings.stage3,
                total_ms: r.timings.total,
                mask_ratio: ratios.get(r.query_id.as_str()).copied(),
                flags: r.flags.iter().cloned().collect::<Vec<_>>().join(";"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// JSON writes the report; CSV writes one header plus one row per query.
pub fn emit_report(report: &MetricsReport, rows: &[QueryRow], path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let json = serde_json::to_string_pretty(report)?;
            std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_rows(path: &Path) -> Result<Vec<QueryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;
    use crate::matching::Correspondence;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<QueryLabel> {
        (0..n)
            .map(|i| QueryLabel {
                query_id: format!("q{i}"),
                true_product_id: format!("p{i}"),
            })
            .collect()
    }

    #[test]
    fn counting_accuracy() {
        let l = labels(10);
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let truths: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let rankings = (0..10).map(|i| {
            let list = if i < 7 { vec!["x", truths[i].as_str()] } else { vec!["x", "y"] };
            (ids[i].as_str(), list)
        });
        assert_eq!(ranking_accuracy(rankings, &l, 35).unwrap(), 0.7);

        let all_first = (0..10).map(|i| (ids[i].as_str(), vec![truths[i].as_str()]));
        assert_eq!(ranking_accuracy(all_first, &l, 1).unwrap(), 1.0);

        assert!(matches!(
            ranking_accuracy([("zz", vec!["p0"])], &l, 1),
            Err(Error::LabelMissing(_))
        ));
    }

    #[test]
    fn latency_percentiles() {
        let s = summarize_latency(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.p50, 3.0);
        assert!((s.p95 - 4.8).abs() < 1e-12);
        assert_eq!(summarize_latency(&[]), LatencySummary::default());
    }

    fn fs(points: &[(f32, f32)]) -> FeatureSet {
        FeatureSet::from_rows(
            points.iter().map(|&(x, y)| Keypoint { x, y, response: 1.0 }).collect(),
            &vec![vec![1.0]; points.len()],
        )
        .unwrap()
    }

    fn matches(n: usize) -> MatchSet {
        MatchSet::new(
            (0..n)
                .map(|i| Correspondence {
                    query_idx: i,
                    gallery_idx: i,
                    distance: 0.0,
                })
                .collect(),
        )
    }

    #[test]
    fn mask_ratio_formula() {
        let mask = Mask::from_fn(10, 10, |x, _| x < 5);
        let a = fs(&[(1.0, 1.0), (7.0, 1.0), (8.0, 2.0), (2.0, 2.0)]);
        let b = fs(&[(1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (9.0, 9.0)]);
        let r = out_of_mask_ratio("q", &matches(4), &a, &b, &mask, &mask).unwrap();
        assert_eq!((r.out_mask, r.in_mask), (3, 1));
        assert_eq!(r.ratio, 0.75);

        let inside = fs(&[(1.0, 1.0), (2.0, 3.0)]);
        let r = out_of_mask_ratio("q", &matches(2), &inside, &inside, &mask, &mask).unwrap();
        assert_eq!(r.ratio, 0.0);

        assert!(matches!(
            out_of_mask_ratio("q", &MatchSet::default(), &inside, &inside, &mask, &mask),
            Err(Error::NoMatches)
        ));
    }

    fn rec(ratio: f64) -> MaskRatioRecord {
        MaskRatioRecord {
            query_id: String::new(),
            out_mask: 0,
            in_mask: 1,
            ratio,
        }
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&vec![rec(0.0); 7], 10).unwrap();
        assert_eq!(h[0].count, 7);
        assert!(histogram(&[], 10).unwrap().iter().all(|b| b.count == 0));
        let h = histogram(&[rec(0.05), rec(0.95)], 10).unwrap();
        assert_eq!(h[0].count, 1);
        assert_eq!(h[9].count, 1);
        assert_eq!(histogram(&[rec(1.0)], 4).unwrap()[3].count, 1);
        assert!(histogram(&[], 0).is_err());
    }

    fn report() -> MetricsReport {
        MetricsReport {
            config: "full#0011aabb".into(),
            n_queries: 2,
            accuracy: Accuracy {
                top1: 0.5,
                top5: 1.0,
                top35: 1.0,
            },
            latency_ms: StageLatency::default(),
            mask_ratio_histogram: histogram(&[rec(0.3)], 5).unwrap(),
            mask_ratio_skipped: 1,
            failed_queries: 0,
        }
    }

    fn row(id: &str) -> QueryRow {
        QueryRow {
            query_id: id.into(),
            true_product_id: "p".into(),
            top1_product_id: "p".into(),
            true_rank: Some(1),
            stage1_rank: None,
            stage1_ms: 0.5,
            stage2_ms: 0.25,
            stage3_ms: 3.0,
            total_ms: 3.75,
            mask_ratio: Some(0.1),
            flags: "a;b".into(),
        }
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("r.json");
        emit_report(&report(), &[], &json, ReportFormat::Json).unwrap();
        assert_eq!(load_report(&json).unwrap(), report());

        let csv_path = dir.path().join("r.csv");
        let rows = vec![row("q0"), row("q1")];
        emit_report(&report(), &rows, &csv_path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(load_rows(&csv_path).unwrap(), rows);

        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::UnknownFormat(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn accuracy_monotone_in_k(
            ranks in proptest::collection::vec(proptest::collection::vec(0u8..8, 1..8), 1..20),
            truth in proptest::collection::vec(0u8..8, 20),
        ) {
            let ids: Vec<String> = (0..ranks.len()).map(|i| format!("q{i}")).collect();
            let products: Vec<Vec<String>> = ranks
                .iter()
                .map(|r| {
                    let mut seen = HashSet::new();
                    r.iter().filter(|p| seen.insert(**p)).map(|p| format!("p{p}")).collect()
                })
                .collect();
            let l: Vec<QueryLabel> = (0..ranks.len())
                .map(|i| QueryLabel { query_id: ids[i].clone(), true_product_id: format!("p{}", truth[i]) })
                .collect();
            let mut prev = 0.0;
            for k in 1..=9 {
                let acc = ranking_accuracy(
                    (0..ranks.len()).map(|i| (ids[i].as_str(), products[i].iter().map(String::as_str).collect())),
                    &l,
                    k,
                )
                .unwrap();
                prop_assert!(acc >= prev);
                prop_assert!((0.0..=1.0).contains(&acc));
                prev = acc;
            }
        }

        #[test]
        fn histogram_conserves_counts(ratios in proptest::collection::vec(0.0f64..=1.0, 0..50), bins in 1usize..20) {
            let records: Vec<_> = ratios.iter().map(|&r| rec(r)).collect();
            let h = histogram(&records, bins).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), records.len());
        }
    }
}
