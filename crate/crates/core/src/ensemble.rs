//! Probability-level late fusion and the simplex grid search over weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite;

/// Non-negative per-model weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid_config("no fusion weights"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid_config(format!("weights must be non-negative: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_config(format!("weights sum to {sum}, not 1")));
        }
        Ok(FusionWeights(weights))
    }

    pub fn equal(models: usize) -> Self {
        FusionWeights(vec![1.0 / models as f64; models])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for FusionWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        FusionWeights::new(v)
    }
}

impl From<FusionWeights> for Vec<f64> {
    fn from(w: FusionWeights) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Equal,
    Optimized,
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchObjective {
    #[default]
    Accuracy,
    Auc,
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid_input(format!("{p} is not a probability")));
    }
    Ok(())
}

/// Weighted mean `Σ wᵢ·pᵢ` of per-model probabilities.
pub fn fuse_weighted(probs: &[f64], w: &FusionWeights) -> Result<f64> {
    if probs.len() != w.len() {
        return Err(Error::invalid_input(format!(
            "{} probabilities for {} weights",
            probs.len(),
            w.len()
        )));
    }
    for &p in probs {
        check_probability(p)?;
    }
    let fused: f64 = probs.iter().zip(w.as_slice()).map(|(p, w)| p * w).sum();
    Ok(fused.clamp(0.0, 1.0))
}

/// Majority class over an odd number of binary decisions.
pub fn fuse_majority(decisions: &[u8]) -> Result<u8> {
    if decisions.len() % 2 == 0 {
        return Err(Error::invalid_config(format!(
            "majority vote needs an odd model count, got {}",
            decisions.len()
        )));
    }
    if decisions.iter().any(|d| *d > 1) {
        return Err(Error::invalid_input("decisions must be 0 or 1"));
    }
    let ones = decisions.iter().filter(|d| **d == 1).count();
    Ok(u8::from(2 * ones > decisions.len()))
}

/// Per-sample fused scores for model-major probabilities `probs[model][sample]`.
///
/// Majority voting reports the fraction of models voting fake, so its score
/// thresholded at 0.5 reproduces the vote.
pub fn fuse_scores(
    probs: &[Vec<f64>],
    strategy: FusionStrategy,
    weights: &FusionWeights,
    threshold: f64,
) -> Result<Vec<f64>> {
    let n = aligned_len(probs)?;
    (0..n)
        .map(|i| {
            let row: Vec<f64> = probs.iter().map(|m| m[i]).collect();
            match strategy {
                FusionStrategy::Majority => {
                    let votes: Vec<u8> = row.iter().map(|p| u8::from(*p >= threshold)).collect();
                    fuse_majority(&votes)?;
                    Ok(votes.iter().filter(|v| **v == 1).count() as f64 / votes.len() as f64)
                }
                FusionStrategy::Equal => fuse_weighted(&row, &FusionWeights::equal(row.len())),
                FusionStrategy::Optimized => fuse_weighted(&row, weights),
            }
        })
        .collect()
}

fn aligned_len(probs: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = probs.first() else {
        return Err(Error::invalid_input("no models"));
    };
    if probs.iter().any(|m| m.len() != first.len()) {
        return Err(Error::invalid_input("per-model probability lists differ in length"));
    }
    Ok(first.len())
}

/// Every weight vector on the simplex grid with `steps` increments, in
/// ascending lexicographic order. Entries are increment counts.
pub fn simplex_grid(models: usize, steps: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, left: u32, slots: usize, out: &mut Vec<Vec<u32>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in 0..=left {
            prefix.push(c);
            rec(prefix, left - c, slots - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if models > 0 {
        rec(&mut Vec::new(), steps, models, &mut out);
    }
    out
}

/// Number of increments when `step` divides one exactly in hundredths.
pub fn grid_steps(step: f64) -> Result<u32> {
    let hundredths = (step * 100.0).round();
    if !(step > 0.0) || (step * 100.0 - hundredths).abs() > 1e-9 || hundredths < 1.0 || 100 % hundredths as u32 != 0 {
        return Err(Error::invalid_config(format!("step {step} must divide 1 in hundredths")));
    }
    Ok(100 / hundredths as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub weights: FusionWeights,
    /// Objective value at the returned weights.
    pub score: f64,
    pub grid_size: usize,
    pub objective: SearchObjective,
}

fn objective_value(labels: &[u8], fused: &[f64], threshold: f64, objective: SearchObjective) -> Result<f64> {
    match objective {
        SearchObjective::Accuracy => {
            let correct = fused
                .iter()
                .zip(labels)
                .filter(|(p, &y)| (**p >= threshold) == (y == 1))
                .count();
            Ok(correct as f64 / labels.len() as f64)
        }
        SearchObjective::Auc => Ok(evalsuite::roc_auc(labels, fused)?.auc),
    }
}

/// Exhaustive search over the simplex grid. The first maximizer in ascending
/// lexicographic order wins ties.
pub fn search_weights(
    probs: &[Vec<f64>],
    labels: &[u8],
    step: f64,
    threshold: f64,
    objective: SearchObjective,
) -> Result<SearchResult> {
    let n = aligned_len(probs)?;
    if n == 0 {
        return Err(Error::invalid_input("empty validation set"));
    }
    if n != labels.len() {
        return Err(Error::invalid_input("probabilities and labels are not aligned"));
    }
    for &p in probs.iter().flatten() {
        check_probability(p)?;
    }
    let steps = grid_steps(step)?;
    let grid = simplex_grid(probs.len(), steps);
    let mut best: Option<(f64, &Vec<u32>)> = None;
    let mut fused = vec![0.0; n];
    for counts in &grid {
        for (i, f) in fused.iter_mut().enumerate() {
            *f = counts
                .iter()
                .zip(probs)
                .map(|(&c, m)| c as f64 / steps as f64 * m[i])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
        let score = objective_value(labels, &fused, threshold, objective)?;
        if best.map_or(true, |(b, _)| score > b) {
            best = Some((score, counts));
        }
    }
    let (score, counts) = best.expect("grid is non-empty");
    Ok(SearchResult {
        weights: FusionWeights(counts.iter().map(|&c| c as f64 / steps as f64).collect()),
        score,
        grid_size: grid.len(),
        objective,
    })
}

/// One validation sample with every model's output and the fused result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: u8,
    pub probs: Vec<f64>,
    pub fused: f64,
    pub decision: u8,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, label: u8, probs: Vec<f64>, fused: f64, threshold: f64) -> Result<Self> {
        if label > 1 {
            return Err(Error::invalid_input("label must be 0 or 1"));
        }
        for &p in probs.iter().chain(std::iter::once(&fused)) {
            check_probability(p)?;
        }
        Ok(PredictionRecord {
            id: id.into(),
            label,
            probs,
            fused,
            decision: u8::from(fused >= threshold),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub weights: FusionWeights,
    /// Validation accuracy per strategy and per single model.
    pub accuracy: BTreeMap<String, f64>,
    pub grid_size: usize,
    pub objective: SearchObjective,
}
