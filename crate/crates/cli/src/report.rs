//! Prediction tables and evaluation reports.
//!
//! Everything in an [`Evaluation`] is computed from a [`PredictionTable`]
//! alone, so feeding a written prediction CSV back in reproduces the report.

use std::collections::BTreeMap;
use std::path::Path;

use deepfake_core::ensemble::{fuse_scores, search_weights, FusionReport, FusionStrategy, FusionWeights, SearchObjective};
use deepfake_core::evalsuite::{
    average_precision, classification_metrics, comparison_pairs, equal_error_rate, mcnemar, roc_auc, ConfusionMatrix,
    McNemarResult, RocCurve,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ENSEMBLE: &str = "ensemble";

/// Per-sample probabilities of every model, model-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub models: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub probs: Vec<Vec<f64>>,
}

impl PredictionTable {
    pub fn validate(&self) -> CliResult<()> {
        if self.models.is_empty() || self.models.len() != self.probs.len() {
            return Err(CliError::Config("prediction table needs one probability column per model".into()));
        }
        let n = self.ids.len();
        if self.labels.len() != n || self.probs.iter().any(|p| p.len() != n) {
            return Err(CliError::Config("prediction table columns differ in length".into()));
        }
        Ok(())
    }
}

/// `id,label,p_<model>...,fused,decision`, floats in shortest round-trip form.
pub fn write_predictions(path: &Path, table: &PredictionTable, fused: &[f64], threshold: f64) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(table.models.iter().map(|m| format!("p_{m}")));
    header.extend(["fused".to_string(), "decision".to_string()]);
    w.write_record(&header).map_err(|e| CliError::io(path, e))?;
    for i in 0..table.ids.len() {
        let mut row = vec![table.ids[i].clone(), table.labels[i].to_string()];
        row.extend(table.probs.iter().map(|p| p[i].to_string()));
        row.push(fused[i].to_string());
        row.push(u8::from(fused[i] >= threshold).to_string());
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_predictions(path: &Path) -> CliResult<PredictionTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    if header.get(0) != Some("id") || header.get(1) != Some("label") {
        return Err(bad("expected id,label,... header".into()));
    }
    let model_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("p_").map(|m| (i, m.to_string())))
        .collect();
    let mut table = PredictionTable {
        models: model_cols.iter().map(|(_, m)| m.clone()).collect(),
        ids: Vec::new(),
        labels: Vec::new(),
        probs: vec![Vec::new(); model_cols.len()],
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("row {}: missing column {i}", line + 2)));
        table.ids.push(field(0)?.to_string());
        let label: u8 = field(1)?.parse().map_err(|e| bad(format!("row {}: label: {e}", line + 2)))?;
        table.labels.push(label);
        for (m, (col, _)) in model_cols.iter().enumerate() {
            let p: f64 = field(*col)?.parse().map_err(|e| bad(format!("row {}: {e}", line + 2)))?;
            table.probs[m].push(p);
        }
    }
    table.validate()?;
    Ok(table)
}

/// The seven headline metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadlineMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub eer: f64,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub metrics: HeadlineMetrics,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarRow {
    pub first: String,
    pub second: String,
    #[serde(flatten)]
    pub result: McNemarResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub fusion: FusionStrategy,
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// `alpha` divided by the number of McNemar comparisons.
    pub corrected_alpha: f64,
    pub models: Vec<ModelReport>,
    pub ensemble: ModelReport,
    pub mcnemar: Vec<McNemarRow>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub fusion: FusionReport,
    pub fused: Vec<f64>,
    /// ROC curves of every model, then the ensemble.
    pub roc: Vec<(String, RocCurve)>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub strategy: FusionStrategy,
    pub step: f64,
    pub objective: SearchObjective,
    pub threshold: f64,
    pub alpha: f64,
}

fn model_report(name: &str, labels: &[u8], scores: &[f64], threshold: f64) -> CliResult<(ModelReport, RocCurve)> {
    let cls = classification_metrics(labels, scores, threshold)?;
    let roc = roc_auc(labels, scores)?;
    let metrics = HeadlineMetrics {
        accuracy: cls.accuracy,
        precision: cls.precision,
        recall: cls.recall,
        f1: cls.f1,
        auc: roc.auc,
        eer: equal_error_rate(labels, scores)?.eer,
        average_precision: average_precision(labels, scores)?,
    };
    let report = ModelReport {
        name: name.to_string(),
        metrics,
        confusion: cls.confusion,
    };
    Ok((report, roc))
}

fn accuracy(labels: &[u8], scores: &[f64], threshold: f64) -> f64 {
    correct(labels, scores, threshold).iter().filter(|&&c| c).count() as f64 / labels.len() as f64
}

fn correct(labels: &[u8], scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().zip(labels).map(|(p, &y)| (*p >= threshold) == (y == 1)).collect()
}

/// Fuses, scores every model and the ensemble, and runs the pairwise tests.
pub fn evaluate_table(table: &PredictionTable, s: &EvalSettings) -> CliResult<Evaluation> {
    table.validate()?;
    let labels = &table.labels;
    let searched = search_weights(&table.probs, labels, s.step, s.threshold, s.objective)?;
    let equal = FusionWeights::equal(table.models.len());
    let weights = match s.strategy {
        FusionStrategy::Optimized => searched.weights.clone(),
        FusionStrategy::Equal | FusionStrategy::Majority => equal.clone(),
    };
    let fused = fuse_scores(&table.probs, s.strategy, &weights, s.threshold)?;

    let mut accuracy_map = BTreeMap::new();
    for (name, strategy, w) in [
        ("equal", FusionStrategy::Equal, &equal),
        ("optimized", FusionStrategy::Optimized, &searched.weights),
        ("majority", FusionStrategy::Majority, &equal),
    ] {
        let scores = fuse_scores(&table.probs, strategy, w, s.threshold)?;
        accuracy_map.insert(name.to_string(), accuracy(labels, &scores, s.threshold));
    }

    let mut models = Vec::new();
    let mut roc = Vec::new();
    for (name, p) in table.models.iter().zip(&table.probs) {
        accuracy_map.insert(name.clone(), accuracy(labels, p, s.threshold));
        let (r, c) = model_report(name, labels, p, s.threshold)?;
        models.push(r);
        roc.push((name.clone(), c));
    }
    let (ensemble, ens_roc) = model_report(ENSEMBLE, labels, &fused, s.threshold)?;
    roc.push((ENSEMBLE.to_string(), ens_roc));

    let mut outcomes: Vec<Vec<bool>> = table.probs.iter().map(|p| correct(labels, p, s.threshold)).collect();
    outcomes.push(correct(labels, &fused, s.threshold));
    let mut names = table.models.clone();
    names.push(ENSEMBLE.to_string());
    let pairs = comparison_pairs(table.models.len());
    let mut rows = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        rows.push(McNemarRow {
            first: names[a].clone(),
            second: names[b].clone(),
            result: mcnemar(&outcomes[a], &outcomes[b], s.alpha, pairs.len())?,
        });
    }

    let report = EvalReport {
        threshold: s.threshold,
        fusion: s.strategy,
        weights: weights.as_slice().to_vec(),
        alpha: s.alpha,
        corrected_alpha: s.alpha / pairs.len().max(1) as f64,
        models,
        ensemble,
        mcnemar: rows,
    };
    let fusion = FusionReport {
        weights: searched.weights,
        accuracy: accuracy_map,
        grid_size: searched.grid_size,
        objective: searched.objective,
    };
    Ok(Evaluation {
        report,
        fusion,
        fused,
        roc,
    })
}

/// `model,fpr,tpr,threshold` rows for every curve.
pub fn write_roc_csv(path: &Path, curves: &[(String, RocCurve)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(["model", "fpr", "tpr", "threshold"]).map_err(|e| CliError::io(path, e))?;
    for (name, c) in curves {
        for i in 0..c.fpr.len() {
            w.write_record([name.clone(), c.fpr[i].to_string(), c.tpr[i].to_string(), c.thresholds[i].to_string()])
                .map_err(|e| CliError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> PredictionTable {
        PredictionTable {
            models: vec!["a".into(), "b".into(), "c".into()],
            ids: (0..8).map(|i| format!("s{i}")).collect(),
            labels: vec![0, 0, 0, 0, 1, 1, 1, 1],
            probs: vec![
                vec![0.1, 0.2, 0.6, 0.3, 0.7, 0.8, 0.4, 0.9],
                vec![0.2, 0.1, 0.3, 0.7, 0.6, 0.35, 0.8, 0.7],
                vec![0.3, 0.55, 0.1, 0.2, 0.45, 0.9, 0.7, 0.6],
            ],
        }
    }

    fn settings() -> EvalSettings {
        EvalSettings {
            strategy: FusionStrategy::Optimized,
            step: 0.01,
            objective: SearchObjective::Accuracy,
            threshold: 0.5,
            alpha: 0.05,
        }
    }

    #[test]
    fn report_has_seven_metrics_and_six_tests() {
        let ev = evaluate_table(&table(), &settings()).unwrap();
        let json = serde_json::to_value(&ev.report).unwrap();
        let keys: Vec<&String> = json["ensemble"]["metrics"].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 7);
        for k in ["accuracy", "precision", "recall", "f1", "auc", "eer", "average_precision"] {
            assert!(json["models"][0]["metrics"].get(k).is_some(), "{k}");
        }
        let pairs: Vec<(String, String)> = ev.report.mcnemar.iter().map(|r| (r.first.clone(), r.second.clone())).collect();
        let expect = [("a", "b"), ("a", "c"), ("b", "c"), ("a", "ensemble"), ("b", "ensemble"), ("c", "ensemble")];
        assert_eq!(pairs.len(), 6);
        for (p, e) in pairs.iter().zip(expect) {
            assert_eq!((p.0.as_str(), p.1.as_str()), e);
        }
        assert!((ev.report.corrected_alpha - 0.05 / 6.0).abs() < 1e-15);
        assert!(ev.fusion.accuracy["optimized"] >= ev.fusion.accuracy["equal"]);
    }

    #[test]
    fn csv_round_trip_reproduces_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let t = table();
        let ev = evaluate_table(&t, &settings()).unwrap();
        write_predictions(&path, &t, &ev.fused, 0.5).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, t);
        let again = evaluate_table(&back, &settings()).unwrap();
        assert_eq!(
            serde_json::to_string(&again.report).unwrap(),
            serde_json::to_string(&ev.report).unwrap()
        );
    }

    #[test]
    fn single_class_validation_is_rejected() {
        let mut t = table();
        t.labels = vec![1; 8];
        assert!(evaluate_table(&t, &settings()).is_err());
    }
}
