//! Threshold metrics, ranking metrics, paired McNemar tests and cluster
//! separability indices. Fake is the positive class (label 1).

mod separability;

pub use separability::{
    calinski_harabasz, davies_bouldin, intercentroid, separability_report, CentroidDistance, CovarianceKind,
    DistanceMetric, SeparabilityReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    /// Set when a ratio had an empty denominator and was reported as 0.
    pub degenerate: bool,
}

fn check_aligned(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::invalid_input(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::invalid_input("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid_input("scores must be finite"));
    }
    Ok(())
}

pub fn confusion_matrix(labels: &[u8], scores: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    check_aligned(labels, scores)?;
    let mut cm = ConfusionMatrix::default();
    for (&y, &s) in labels.iter().zip(scores) {
        match (y == 1, s >= threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub fn classification_metrics(labels: &[u8], scores: &[f64], threshold: f64) -> Result<ClassificationMetrics> {
    if labels.is_empty() {
        return Err(Error::invalid_input("no samples"));
    }
    let cm = confusion_matrix(labels, scores, threshold)?;
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        precision,
        recall,
        f1,
        confusion: cm,
        degenerate,
    })
}

/// ROC operating points from the strictest threshold to the loosest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Score threshold per point; the first point uses `+inf`.
    pub thresholds: Vec<f64>,
}

struct Sweep {
    positives: u64,
    negatives: u64,
    // Cumulative (fp, tp) counts, starting at (0, 0).
    counts: Vec<(u64, u64)>,
    thresholds: Vec<f64>,
}

// Descending-score sweep with tied scores collapsed into one step.
fn sweep(labels: &[u8], scores: &[f64]) -> Sweep {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut counts = vec![(0, 0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        counts.push((fp, tp));
        thresholds.push(s);
    }
    let positives = labels.iter().filter(|l| **l == 1).count() as u64;
    Sweep {
        positives,
        negatives: labels.len() as u64 - positives,
        counts,
        thresholds,
    }
}

fn both_classes(labels: &[u8], scores: &[f64], what: &str) -> Result<Sweep> {
    check_aligned(labels, scores)?;
    let s = sweep(labels, scores);
    if s.positives == 0 || s.negatives == 0 {
        return Err(Error::UndefinedMetric(format!("{what} needs both classes present")));
    }
    Ok(s)
}

/// Trapezoidal area under the ROC curve.
///
/// The area is accumulated in integer units of `1 / (2 · P · N)` and divided
/// once, so it equals the pairwise concordance with half-credit ties exactly.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<RocCurve> {
    let s = both_classes(labels, scores, "ROC AUC")?;
    let mut twice_area: u128 = 0;
    for w in s.counts.windows(2) {
        let (fp0, tp0) = w[0];
        let (fp1, tp1) = w[1];
        twice_area += (fp1 - fp0) as u128 * (tp0 + tp1) as u128;
    }
    let denom = 2 * s.positives as u128 * s.negatives as u128;
    let (p, n) = (s.positives as f64, s.negatives as f64);
    Ok(RocCurve {
        auc: twice_area as f64 / denom as f64,
        fpr: s.counts.iter().map(|c| c.0 as f64 / n).collect(),
        tpr: s.counts.iter().map(|c| c.1 as f64 / p).collect(),
        thresholds: s.thresholds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualErrorRate {
    pub eer: f64,
    pub threshold: f64,
}

/// Rate where FPR equals FNR, interpolated linearly between the adjacent ROC
/// points that bracket the crossing.
pub fn equal_error_rate(labels: &[u8], scores: &[f64]) -> Result<EqualErrorRate> {
    let roc = roc_auc(labels, scores)?;
    let gap = |i: usize| roc.fpr[i] - (1.0 - roc.tpr[i]);
    for i in 1..roc.fpr.len() {
        let (g0, g1) = (gap(i - 1), gap(i));
        if g1 < 0.0 {
            continue;
        }
        let t = if g1 == g0 { 0.0 } else { -g0 / (g1 - g0) };
        let eer = roc.fpr[i - 1] + t * (roc.fpr[i] - roc.fpr[i - 1]);
        let (th0, th1) = (roc.thresholds[i - 1], roc.thresholds[i]);
        let threshold = if th0.is_finite() { th0 + t * (th1 - th0) } else { th1 };
        return Ok(EqualErrorRate { eer, threshold });
    }
    unreachable!("the last ROC point always has FPR - FNR = 1")
}

/// Step-wise area under the precision-recall curve, `Σ (Rₙ − Rₙ₋₁)·Pₙ`.
pub fn average_precision(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_aligned(labels, scores)?;
    let s = sweep(labels, scores);
    if s.positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive sample".into()));
    }
    let p = s.positives as f64;
    let mut ap = 0.0;
    for w in s.counts.windows(2) {
        let (fp1, tp1) = w[1];
        let dr = (tp1 - w[0].1) as f64 / p;
        if dr > 0.0 {
            ap += dr * tp1 as f64 / (tp1 + fp1) as f64;
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Both correct.
    pub n11: u64,
    /// Only the first classifier correct.
    pub n10: u64,
    /// Only the second classifier correct.
    pub n01: u64,
    /// Both wrong.
    pub n00: u64,
    pub chi2: f64,
    pub p_value: f64,
    pub significant: bool,
    /// No disagreements: χ² is 0 and p is 1 by convention.
    pub degenerate: bool,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1dof(chi2: f64) -> f64 {
    libm::erfc((chi2 / 2.0).sqrt())
}

/// Continuity-corrected McNemar test from a contingency table. Significance
/// uses the Bonferroni threshold `alpha / comparisons`.
pub fn mcnemar_from_counts(n11: u64, n10: u64, n01: u64, n00: u64, alpha: f64, comparisons: usize) -> Result<McNemarResult> {
    if !(alpha > 0.0 && alpha < 1.0) || comparisons == 0 {
        return Err(Error::invalid_config("alpha must be in (0, 1) with at least one comparison"));
    }
    let discordant = n10 + n01;
    let (chi2, degenerate) = if discordant == 0 {
        (0.0, true)
    } else {
        let corrected = (n10.abs_diff(n01) as f64 - 1.0).max(0.0);
        (corrected * corrected / discordant as f64, false)
    };
    let p_value = chi2_sf_1dof(chi2);
    Ok(McNemarResult {
        n11,
        n10,
        n01,
        n00,
        chi2,
        p_value,
        significant: p_value < alpha / comparisons as f64,
        degenerate,
    })
}

/// McNemar test from per-sample correctness flags of two classifiers.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool], alpha: f64, comparisons: usize) -> Result<McNemarResult> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::invalid_input("correctness flags are not aligned"));
    }
    let (mut n11, mut n10, mut n01, mut n00) = (0, 0, 0, 0);
    for (&a, &b) in correct_a.iter().zip(correct_b) {
        match (a, b) {
            (true, true) => n11 += 1,
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
            (false, false) => n00 += 1,
        }
    }
    mcnemar_from_counts(n11, n10, n01, n00, alpha, comparisons)
}

/// Pair order for comparing base models with each other and then each base
/// model with the ensemble at index `base_count`.
pub fn comparison_pairs(base_count: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..base_count {
        for j in i + 1..base_count {
            pairs.push((i, j));
        }
    }
    pairs.extend((0..base_count).map(|i| (i, base_count)));
    pairs
}
