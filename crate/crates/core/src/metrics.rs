//! Pose accuracy metrics and the covariance-versus-pose distance analysis.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::PoseSE3;
use crate::data::{se3_distance, Sample};
use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;
use crate::losses::rotation_angle;
use crate::spd::{cov_pool, log_eig, reeig_forward, FeatureMap};

pub const AUC_MAX_THRESHOLD: f64 = 0.10;
pub const ACCURACY_FRACTION: f64 = 0.1;
/// Floor applied before the matrix log in the correlation analysis.
pub const ANALYSIS_EPS: f64 = 1e-4;

/// Mean distance between corresponding transformed model points.
pub fn add_metric(points: &[Vector3<f64>], pose_hat: &PoseSE3, pose_gt: &PoseSE3) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let sum: f64 = points.iter().map(|p| (pose_hat.transform(p) - pose_gt.transform(p)).norm()).sum();
    sum / points.len() as f64
}

/// Mean nearest-neighbour distance from predicted to ground-truth points.
pub fn adds_metric(points: &[Vector3<f64>], pose_hat: &PoseSE3, pose_gt: &PoseSE3) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let gt: Vec<Vector3<f64>> = points.iter().map(|p| pose_gt.transform(p)).collect();
    let sum: f64 = points
        .iter()
        .map(|p| {
            let q = pose_hat.transform(p);
            gt.iter().map(|g| (q - g).norm()).fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / points.len() as f64
}

/// Fraction of errors strictly below `0.1 · diameter`.
pub fn add_accuracy(errors: &[f64], diameter: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let thr = ACCURACY_FRACTION * diameter;
    errors.iter().filter(|&&e| e < thr).count() as f64 / errors.len() as f64
}

/// Area under the accuracy-vs-threshold curve on `[0, max_threshold]`, normalized.
///
/// The empirical CDF is a step function, so the integral is exact:
/// `mean_i max(0, τ − e_i) / τ`.
pub fn auc_add(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() || !(max_threshold > 0.0) {
        return 0.0;
    }
    let s: f64 = errors.iter().map(|&e| (max_threshold - e).max(0.0) / max_threshold).sum();
    s / errors.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub add: f64,
    pub adds: f64,
    pub rotation_err_deg: f64,
    pub translation_err_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub add_mean: f64,
    pub adds_mean: f64,
    pub add_accuracy: f64,
    pub auc_add: f64,
    pub median_rotation_deg: f64,
    pub median_translation_m: f64,
    pub records: Vec<SampleRecord>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics over `(id, predicted, ground truth)` triples.
pub fn evaluate_poses(points: &[Vector3<f64>], diameter: f64, preds: &[(usize, PoseSE3, PoseSE3)]) -> MetricReport {
    let records: Vec<SampleRecord> = preds
        .iter()
        .map(|(id, hat, gt)| SampleRecord {
            id: *id,
            add: add_metric(points, hat, gt),
            adds: adds_metric(points, hat, gt),
            rotation_err_deg: rotation_angle(&hat.rotation, &gt.rotation).to_degrees(),
            translation_err_m: (hat.translation - gt.translation).norm(),
        })
        .collect();
    let adds: Vec<f64> = records.iter().map(|r| r.add).collect();
    let n = records.len().max(1) as f64;
    MetricReport {
        add_mean: adds.iter().sum::<f64>() / n,
        adds_mean: records.iter().map(|r| r.adds).sum::<f64>() / n,
        add_accuracy: add_accuracy(&adds, diameter),
        auc_add: auc_add(&adds, AUC_MAX_THRESHOLD),
        median_rotation_deg: median(&records.iter().map(|r| r.rotation_err_deg).collect::<Vec<_>>()),
        median_translation_m: median(&records.iter().map(|r| r.translation_err_m).collect::<Vec<_>>()),
        records,
    }
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return 0.0;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => (1.0 - dot / (na * nb)).max(0.0),
        (false, false) => 0.0,
        _ => 1.0,
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_cov_dist: f64,
    pub mean_cosine_dist: f64,
    pub mean_euclid_dist: f64,
    pub count: usize,
}

impl CorrelationBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Binned distances; only non-empty bins are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub bins: Vec<CorrelationBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistances {
    pub pose: f64,
    pub cov: f64,
    pub cosine: f64,
    pub euclid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub curve: CorrelationCurve,
    pub spearman_cov: f64,
    pub spearman_cosine: f64,
    pub spearman_euclid: f64,
    pub pairs: Vec<PairDistances>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub n_pairs: usize,
    pub bins: usize,
    pub seed: u64,
    /// Translation scale of the pose distance, metres.
    pub translation_scale: f64,
}

/// Log-Euclidean embedding of the floored spatial covariance, plus flattened features.
fn embed(features: &FeatureMap) -> Result<(Mat, Vec<f64>)> {
    let cov = reeig_forward(&cov_pool(features)?, ANALYSIS_EPS)?;
    Ok((log_eig(&cov)?, features.data.clone()))
}

pub fn covariance_pose_correlation<F>(samples: &[Sample], feature_fn: F, cfg: &CorrelationConfig) -> Result<CorrelationResult>
where
    F: Fn(&FeatureMap) -> Result<FeatureMap> + Sync,
{
    if samples.len() < 2 {
        return invalid(format!("correlation: need at least 2 samples, got {}", samples.len()));
    }
    if cfg.bins == 0 || cfg.n_pairs == 0 || !(cfg.translation_scale > 0.0) {
        return Err(Error::Config(format!("correlation: invalid settings {cfg:?}")));
    }
    let embedded = samples
        .par_iter()
        .map(|s| embed(&feature_fn(&s.image)?))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = samples.len();
    let index_pairs: Vec<(usize, usize)> = (0..cfg.n_pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            (i, j)
        })
        .collect();
    let pairs: Vec<PairDistances> = index_pairs
        .par_iter()
        .map(|&(i, j)| pair_distances(&samples[i].pose, &samples[j].pose, &embedded[i], &embedded[j], cfg.translation_scale))
        .collect();
    Ok(summarize_pairs(pairs, cfg.bins))
}

fn pair_distances(pa: &PoseSE3, pb: &PoseSE3, a: &(Mat, Vec<f64>), b: &(Mat, Vec<f64>), scale: f64) -> PairDistances {
    PairDistances {
        pose: se3_distance(pa, pb, scale),
        cov: (&a.0 - &b.0).norm(),
        cosine: cosine_distance(&a.1, &b.1),
        euclid: euclidean_distance(&a.1, &b.1),
    }
}

/// Equal-width bins over `[0, max pose distance]` plus rank correlations.
pub fn summarize_pairs(pairs: Vec<PairDistances>, n_bins: usize) -> CorrelationResult {
    let max_d = pairs.iter().map(|p| p.pose).fold(0.0, f64::max);
    let width = if max_d > 0.0 { max_d / n_bins as f64 } else { 1.0 };
    let mut acc = vec![(0.0, 0.0, 0.0, 0usize); n_bins];
    for p in &pairs {
        let b = ((p.pose / width) as usize).min(n_bins - 1);
        acc[b].0 += p.cov;
        acc[b].1 += p.cosine;
        acc[b].2 += p.euclid;
        acc[b].3 += 1;
    }
    let bins = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.3 > 0)
        .map(|(k, a)| {
            let c = a.3 as f64;
            CorrelationBin {
                lo: k as f64 * width,
                hi: (k + 1) as f64 * width,
                mean_cov_dist: a.0 / c,
                mean_cosine_dist: a.1 / c,
                mean_euclid_dist: a.2 / c,
                count: a.3,
            }
        })
        .collect();
    let pose: Vec<f64> = pairs.iter().map(|p| p.pose).collect();
    let col = |f: fn(&PairDistances) -> f64| pairs.iter().map(f).collect::<Vec<f64>>();
    CorrelationResult {
        curve: CorrelationCurve { bins },
        spearman_cov: spearman(&pose, &col(|p| p.cov)),
        spearman_cosine: spearman(&pose, &col(|p| p.cosine)),
        spearman_euclid: spearman(&pose, &col(|p| p.euclid)),
        pairs,
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

pub const METRICS_CSV_HEADER: [&str; 8] =
    ["kind", "id", "add_m", "adds_m", "rotation_err_deg", "translation_err_m", "add_accuracy", "auc_add"];

/// One row per sample, then a summary row (means for ADD/ADD-S, medians for
/// rotation and translation error).
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_CSV_HEADER).map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            "sample".to_string(),
            r.id.to_string(),
            r.add.to_string(),
            r.adds.to_string(),
            r.rotation_err_deg.to_string(),
            r.translation_err_m.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err)?;
    }
    w.write_record([
        "summary".to_string(),
        String::new(),
        report.add_mean.to_string(),
        report.adds_mean.to_string(),
        report.median_rotation_deg.to_string(),
        report.median_translation_m.to_string(),
        report.add_accuracy.to_string(),
        report.auc_add.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub const CORRELATION_CSV_HEADER: [&str; 5] =
    ["bin_center", "mean_cov_dist", "mean_cosine_dist", "mean_euclid_dist", "count"];

pub fn write_correlation_csv(path: &Path, curve: &CorrelationCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CORRELATION_CSV_HEADER).map_err(csv_err)?;
    for b in &curve.bins {
        w.write_record([
            b.center().to_string(),
            b.mean_cov_dist.to_string(),
            b.mean_cosine_dist.to_string(),
            b.mean_euclid_dist.to_string(),
            b.count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
