//! Uncertainty scores and the detection, misclassification and 3-cluster
//! metrics computed from them. Scores are `u = 1 − max mean softmax`, so a
//! larger value always means more uncertain and OOD is the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetBundle;
use crate::error::{AbnnError, Result};
use crate::model::AbnnModel;
use crate::numerics::{Matrix, Rng};

/// `1 − max_k p_k` per row, evaluated as the sum of the non-maximal
/// probabilities so saturated rows keep their ordering instead of rounding
/// to zero.
pub fn uncertainty_from_probs(probs: &Matrix) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut top = 0;
            for k in 1..row.len() {
                if row[k] > row[top] {
                    top = k;
                }
            }
            row.iter().enumerate().filter(|&(k, _)| k != top).map(|(_, &p)| p).sum()
        })
        .collect()
}

pub fn uncertainty_scores(model: &mut AbnnModel, x: &Matrix, n_samples: usize, rng: &Rng) -> Result<Vec<f64>> {
    Ok(uncertainty_from_probs(&model.predict_mc(x, n_samples, rng)?))
}

fn nonempty(neg: &[f64], pos: &[f64]) -> Result<()> {
    if neg.is_empty() {
        return Err(AbnnError::EmptySet("negative (ID) scores"));
    }
    if pos.is_empty() {
        return Err(AbnnError::EmptySet("positive (OOD) scores"));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Probability that a positive outscores a negative, ties counted ½.
pub fn auroc(neg: &[f64], pos: &[f64]) -> Result<f64> {
    nonempty(neg, pos)?;
    let neg = sorted(neg);
    let mut wins = 0.0;
    for &p in pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (neg.len() as f64 * pos.len() as f64))
}

/// Threshold `t` is the largest positive score that keeps at least 95% of
/// positives at or above it; returns the fraction of negatives below `t`.
pub fn tnr_at_tpr95(neg: &[f64], pos: &[f64]) -> Result<f64> {
    nonempty(neg, pos)?;
    let mut desc = sorted(pos);
    desc.reverse();
    let k = (95 * desc.len()).div_ceil(100).max(1);
    let t = desc[k - 1];
    let below = neg.iter().filter(|&&n| n < t).count();
    Ok(below as f64 / neg.len() as f64)
}

/// Best `½(TPR + TNR)` over thresholds at the midpoints between consecutive
/// distinct scores (and beyond both ends), predicting positive above `t`.
pub fn detection_accuracy(neg: &[f64], pos: &[f64]) -> Result<f64> {
    nonempty(neg, pos)?;
    let mut pooled: Vec<(f64, bool)> = neg
        .iter()
        .map(|&s| (s, false))
        .chain(pos.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n, m) = (neg.len() as f64, pos.len() as f64);
    // Threshold below everything: all positives caught, no negatives.
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    let mut best = 0.5 * (1.0 + 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let s = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == s {
            if pooled[i].1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let tpr = (m - fn_ as f64) / m;
        let tnr = tn as f64 / n;
        best = f64::max(best, 0.5 * (tpr + tnr));
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positive {
    /// ID is the positive class, ranked by negated score.
    In,
    /// OOD is the positive class.
    Out,
}

/// Average precision: `Σ (R_i − R_{i−1})·P_i` over distinct thresholds in
/// decreasing order.
pub fn aupr(neg: &[f64], pos: &[f64], positive_is: Positive) -> Result<f64> {
    nonempty(neg, pos)?;
    let (positives, negatives): (Vec<f64>, Vec<f64>) = match positive_is {
        Positive::Out => (pos.to_vec(), neg.to_vec()),
        Positive::In => (neg.iter().map(|s| -s).collect(), pos.iter().map(|s| -s).collect()),
    };
    Ok(average_precision(&positives, &negatives))
}

fn average_precision(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut pooled: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = positives.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let s = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == s {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Id,
    Semi,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterResult {
    /// `confusion[origin][assigned]`, rows/cols ordered ID, SEMI, FULL.
    pub confusion: [[usize; 3]; 3],
    pub accuracy: f64,
    pub centroids: [f64; 3],
}

fn trimmed(scores: &[f64], trim: f64) -> Vec<f64> {
    let s = sorted(scores);
    let cut = (trim * s.len() as f64).floor() as usize;
    if 2 * cut >= s.len() {
        return Vec::new();
    }
    s[cut..s.len() - cut].to_vec()
}

fn nearest(v: f64, centroids: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if (v - centroids[k]).abs() < (v - centroids[best]).abs() {
            best = k;
        }
    }
    best
}

/// Lloyd's algorithm for 3 centroids on sorted 1-D data, farthest-point
/// initialization from the minimum. Returns centroids in ascending order.
pub fn kmeans3_1d(sorted_values: &[f64]) -> [f64; 3] {
    let lo = sorted_values[0];
    let hi = *sorted_values.last().unwrap();
    let mut third = lo;
    let mut best_gap = -1.0;
    for &v in sorted_values {
        let gap = (v - lo).abs().min((v - hi).abs());
        if gap > best_gap {
            best_gap = gap;
            third = v;
        }
    }
    let mut c = [lo, third, hi];
    for _ in 0..100 {
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for &v in sorted_values {
            let k = nearest(v, &c);
            sums[k] += v;
            counts[k] += 1;
        }
        let mut next = c;
        for k in 0..3 {
            if counts[k] > 0 {
                next[k] = sums[k] / counts[k] as f64;
            }
        }
        let shift = (0..3).map(|k| (next[k] - c[k]).abs()).fold(0.0, f64::max);
        c = next;
        if shift < 1e-12 {
            break;
        }
    }
    c.sort_by(f64::total_cmp);
    c
}

/// Trims `trim` of each tail per set, clusters the pooled scores into three
/// groups by 1-D k-means and labels them ID < SEMI < FULL by centroid.
pub fn cluster3(scores_id: &[f64], scores_semi: &[f64], scores_full: &[f64], trim: f64) -> Result<ClusterResult> {
    if !(0.0..0.5).contains(&trim) {
        return Err(AbnnError::Config(format!("trim must lie in [0, 0.5), got {trim}")));
    }
    let sets = [
        trimmed(scores_id, trim),
        trimmed(scores_semi, trim),
        trimmed(scores_full, trim),
    ];
    if sets.iter().any(Vec::is_empty) {
        return Err(AbnnError::EmptySet("cluster3 input after trimming"));
    }
    let mut pooled: Vec<f64> = sets.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let total = pooled.len();
    let mut confusion = [[0usize; 3]; 3];
    let centroids;
    if pooled[0] == pooled[total - 1] {
        for (o, set) in sets.iter().enumerate() {
            confusion[o][0] = set.len();
        }
        centroids = [pooled[0]; 3];
    } else {
        centroids = kmeans3_1d(&pooled);
        for (o, set) in sets.iter().enumerate() {
            for &v in set {
                confusion[o][nearest(v, &centroids)] += 1;
            }
        }
    }
    let trace: usize = (0..3).map(|k| confusion[k][k]).sum();
    Ok(ClusterResult {
        confusion,
        accuracy: trace as f64 / total as f64,
        centroids,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionMetrics {
    pub tnr_at_tpr95: f64,
    pub auroc: f64,
    pub detection_accuracy: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

pub fn detection_metrics(neg: &[f64], pos: &[f64]) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        tnr_at_tpr95: tnr_at_tpr95(neg, pos)?,
        auroc: auroc(neg, pos)?,
        detection_accuracy: detection_accuracy(neg, pos)?,
        aupr_in: aupr(neg, pos, Positive::In)?,
        aupr_out: aupr(neg, pos, Positive::Out)?,
    })
}

/// Misclassification detection: errors are the positive class, successes the
/// negative one. Metrics needing both classes are absent when one is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisclassificationMetrics {
    pub accuracy: f64,
    pub errors: usize,
    pub auroc: Option<f64>,
    pub tnr_at_tpr95: Option<f64>,
    pub detection_accuracy: Option<f64>,
    pub aupr_err: Option<f64>,
    pub aupr_succ: Option<f64>,
}

pub fn misclassification_metrics(scores: &[f64], correct: &[bool]) -> Result<MisclassificationMetrics> {
    if scores.len() != correct.len() {
        return Err(crate::error::shape_err(
            "misclassification_metrics",
            scores.len(),
            correct.len(),
        ));
    }
    let succ: Vec<f64> = scores
        .iter()
        .zip(correct)
        .filter(|(_, &c)| c)
        .map(|(&s, _)| s)
        .collect();
    let err: Vec<f64> = scores
        .iter()
        .zip(correct)
        .filter(|(_, &c)| !c)
        .map(|(&s, _)| s)
        .collect();
    let both = !succ.is_empty() && !err.is_empty();
    let opt = |f: &dyn Fn() -> Result<f64>| -> Result<Option<f64>> {
        if both {
            f().map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(MisclassificationMetrics {
        accuracy: succ.len() as f64 / scores.len().max(1) as f64,
        errors: err.len(),
        auroc: opt(&|| auroc(&succ, &err))?,
        tnr_at_tpr95: opt(&|| tnr_at_tpr95(&succ, &err))?,
        detection_accuracy: opt(&|| detection_accuracy(&succ, &err))?,
        aupr_err: opt(&|| aupr(&succ, &err, Positive::Out))?,
        aupr_succ: opt(&|| aupr(&succ, &err, Positive::In))?,
    })
}

/// Correctness from the mean network, scores from `n_samples` MC passes.
pub fn misclassification_report(
    model: &mut AbnnModel,
    x: &Matrix,
    labels: &[usize],
    n_samples: usize,
    rng: &Rng,
) -> Result<MisclassificationMetrics> {
    let pred = model.predict_mean(x)?.argmax_rows();
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, l)| p == l).collect();
    let scores = uncertainty_scores(model, x, n_samples, rng)?;
    misclassification_metrics(&scores, &correct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub n_samples_eval: usize,
    pub trim: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_samples_eval: 100,
            trim: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedianUncertainty {
    pub id: f64,
    pub semi: f64,
    pub full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub options: EvalOptions,
    pub config: serde_json::Value,
    pub id_accuracy: f64,
    pub id_vs_full: DetectionMetrics,
    pub id_vs_semi: DetectionMetrics,
    pub misclassification: MisclassificationMetrics,
    pub cluster: ClusterResult,
    pub median_uncertainty: MedianUncertainty,
}

/// Scores of the three test populations of a standardized bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBundle {
    pub id: Vec<f64>,
    pub semi: Vec<f64>,
    pub full: Vec<f64>,
    pub id_correct: Vec<bool>,
}

pub fn score_bundle(model: &mut AbnnModel, bundle: &DatasetBundle, opts: &EvalOptions) -> Result<ScoredBundle> {
    let root = Rng::with_stream(opts.seed, 7);
    let n = opts.n_samples_eval;
    let id = uncertainty_scores(model, &bundle.id_test.features, n, &root.derive(0))?;
    let semi = uncertainty_scores(model, &bundle.semi_ood, n, &root.derive(1))?;
    let full = uncertainty_scores(model, &bundle.full_ood, n, &root.derive(2))?;
    let pred = model.predict_mean(&bundle.id_test.features)?.argmax_rows();
    let id_correct = pred.iter().zip(&bundle.id_test.labels).map(|(p, l)| p == l).collect();
    Ok(ScoredBundle {
        id,
        semi,
        full,
        id_correct,
    })
}

pub fn median(v: &[f64]) -> f64 {
    let s = sorted(v);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn build_report(
    scored: &ScoredBundle,
    opts: &EvalOptions,
    mode: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let misclassification = misclassification_metrics(&scored.id, &scored.id_correct)?;
    Ok(MetricsReport {
        mode: mode.to_string(),
        seed,
        options: opts.clone(),
        config,
        id_accuracy: misclassification.accuracy,
        id_vs_full: detection_metrics(&scored.id, &scored.full)?,
        id_vs_semi: detection_metrics(&scored.id, &scored.semi)?,
        misclassification,
        cluster: cluster3(&scored.id, &scored.semi, &scored.full, opts.trim)?,
        median_uncertainty: MedianUncertainty {
            id: median(&scored.id),
            semi: median(&scored.semi),
            full: median(&scored.full),
        },
    })
}

/// `dataset,rank,uncertainty` rows, each dataset sorted ascending.
pub fn ordered_curve_csv(scored: &ScoredBundle) -> String {
    let mut out = String::from("dataset,rank,uncertainty\n");
    for (name, v) in [("id", &scored.id), ("semi", &scored.semi), ("full", &scored.full)] {
        for (rank, s) in sorted(v).iter().enumerate() {
            let _ = writeln!(out, "{name},{rank},{s}");
        }
    }
    out
}

/// `dataset,bin_left,bin_right,count` over `bins` equal bins of `[0, 1]`.
pub fn histogram_csv(scored: &ScoredBundle, bins: usize) -> String {
    let mut out = String::from("dataset,bin_left,bin_right,count\n");
    for (name, v) in [("id", &scored.id), ("semi", &scored.semi), ("full", &scored.full)] {
        let mut counts = vec![0usize; bins];
        for &s in v.iter() {
            let k = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[k] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{name},{},{},{c}",
                k as f64 / bins as f64,
                (k + 1) as f64 / bins as f64
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncertainty_values() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0 / 3.0; 3]]).unwrap();
        let u = uncertainty_from_probs(&p);
        assert_eq!(u[0], 0.0);
        let saturated = Matrix::row_vector(vec![1.0 - 1e-20, 1e-20]);
        assert_eq!(uncertainty_from_probs(&saturated), vec![1e-20]);
        assert!((u[1] - 2.0 / 3.0).abs() < 1e-15);
        let p = Matrix::row_vector(vec![0.75, 0.25]);
        assert_eq!(uncertainty_from_probs(&p), vec![0.25]);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.7], &[0.5, 0.9]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.2, 0.4, 0.4], &[0.4, 0.2, 0.4]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(AbnnError::EmptySet(_))));
    }

    #[test]
    fn tnr_cases() {
        assert_eq!(tnr_at_tpr95(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        let mut pos = vec![0.9; 19];
        pos.push(0.1);
        assert_eq!(tnr_at_tpr95(&[0.5; 10], &pos).unwrap(), 1.0);
        assert!(tnr_at_tpr95(&[0.5], &[]).is_err());
    }

    #[test]
    fn tnr_same_distribution_near_five_percent() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let t = tnr_at_tpr95(&v, &v).unwrap();
        assert!((t - 0.05).abs() <= 0.002, "{t}");
    }

    #[test]
    fn detection_accuracy_cases() {
        assert_eq!(detection_accuracy(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(detection_accuracy(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.5);
        assert_eq!(detection_accuracy(&[0.1, 0.6], &[0.4, 0.9]).unwrap(), 0.75);
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&[0.1, 0.2], &[0.8, 0.9], Positive::Out).unwrap(), 1.0);
        assert_eq!(aupr(&[0.1, 0.2], &[0.8, 0.9], Positive::In).unwrap(), 1.0);
        let n = 9;
        let neg: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.01).collect();
        let got = aupr(&neg, &[0.1], Positive::Out).unwrap();
        assert!((got - 1.0 / (n as f64 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn cluster3_separated_and_identical() {
        let r = cluster3(&[0.0, 0.01], &[0.5, 0.51], &[0.99, 1.0], 0.0).unwrap();
        assert_eq!(r.confusion, [[2, 0, 0], [0, 2, 0], [0, 0, 2]]);
        assert_eq!(r.accuracy, 1.0);

        let v = [0.1, 0.2, 0.3, 0.5, 0.8, 0.9];
        let r = cluster3(&v, &v, &v, 0.0).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);

        let flat = [0.4; 5];
        let r = cluster3(&flat, &flat, &[0.4; 10], 0.0).unwrap();
        assert_eq!(r.confusion[2][0], 10);
        assert!((r.accuracy - 0.25).abs() < 1e-15);

        assert!(cluster3(&[0.1], &[0.2], &[0.3], 0.6).is_err());
    }

    #[test]
    fn cluster3_trims_tails() {
        let id: Vec<f64> = (0..100).map(|i| 0.01 * (i as f64 / 100.0)).chain([0.99]).collect();
        let semi: Vec<f64> = (0..100).map(|i| 0.5 + 0.01 * (i as f64 / 100.0)).collect();
        let full: Vec<f64> = (0..100).map(|i| 0.95 + 0.01 * (i as f64 / 100.0)).collect();
        let r = cluster3(&id, &semi, &full, 0.01).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let rows: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![99, 98, 98]);
    }

    #[test]
    fn misclassification_edge_cases() {
        let m = misclassification_metrics(&[0.1, 0.2], &[true, true]).unwrap();
        assert_eq!(m.aupr_err, None);
        assert_eq!(m.auroc, None);
        assert_eq!(m.accuracy, 1.0);
        let m = misclassification_metrics(&[0.1, 0.9, 0.2, 0.8], &[true, false, true, false]).unwrap();
        assert_eq!(m.auroc, Some(1.0));
        assert_eq!(m.errors, 2);
    }

    #[test]
    fn figure_csvs_have_expected_rows() {
        let s = ScoredBundle {
            id: vec![0.2, 0.1],
            semi: vec![0.5],
            full: vec![1.0],
            id_correct: vec![true, true],
        };
        let curve = ordered_curve_csv(&s);
        assert!(curve.starts_with("dataset,rank,uncertainty\nid,0,0.1\nid,1,0.2\n"));
        let hist = histogram_csv(&s, 4);
        assert_eq!(hist.lines().count(), 1 + 12);
        assert!(hist.contains("full,0.75,1,1"));
    }
}
