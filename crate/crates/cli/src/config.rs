//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "dataset_root": "data/synthetic",
//!   "backbones": [
//!     { "name": "seconv", "architecture": { "kind": "se_conv", "input_size": 32,
//!       "stem_channels": 8, "stages": [[16, 2], [16, 2]], "se_reduction": 4 } }
//!   ],
//!   "stages": 5,
//!   "seed": 7
//! }
//! ```
//!
//! Omitted fields take the defaults documented on [`ExperimentConfig`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use deepfake_core::backbones::Architecture;
use deepfake_core::ensemble::{grid_steps, FusionStrategy, SearchObjective};
use deepfake_core::imagecore::AugmentConfig;
use deepfake_core::staging::StageHyperparams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Also names the backbone's directory inside the run.
    pub name: String,
    pub architecture: Architecture,
    /// Training-time augmentation; validation images are only resized.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Overrides the experiment-wide hyperparameters.
    #[serde(default)]
    pub hyperparams: Option<StageHyperparams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialSettings {
    pub epsilon: f64,
    pub epochs: usize,
    pub lr: f64,
    pub clean_per_batch: usize,
}

impl Default for AdversarialSettings {
    fn default() -> Self {
        AdversarialSettings {
            epsilon: 0.005,
            epochs: 6,
            lr: 1e-5,
            clean_per_batch: 32,
        }
    }
}

fn default_stages() -> usize {
    5
}

fn default_fusion() -> FusionStrategy {
    FusionStrategy::Optimized
}

fn default_step() -> f64 {
    0.01
}

fn default_threshold() -> f64 {
    0.5
}

fn default_alpha() -> f64 {
    0.05
}

fn default_epsilons() -> Vec<f64> {
    vec![0.005, 0.01, 0.03, 0.05]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding `train/{real,fake}` and `val/{real,fake}`.
    pub dataset_root: PathBuf,
    pub backbones: Vec<BackboneSpec>,
    /// Number of disjoint fake subsets; 1 trains on the raw pool. Default 5.
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the per-architecture table values.
    #[serde(default)]
    pub hyperparams: Option<StageHyperparams>,
    /// Default `optimized`.
    #[serde(default = "default_fusion")]
    pub fusion: FusionStrategy,
    /// Weight grid resolution. Default 0.01.
    #[serde(default = "default_step")]
    pub fusion_step: f64,
    #[serde(default)]
    pub search_objective: SearchObjective,
    /// Decision threshold on the fake probability. Default 0.5.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Family-wise significance level for McNemar tests. Default 0.05.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Default 0.005, 0.01, 0.03, 0.05.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub adversarial: AdversarialSettings,
    /// Run directory; `--out` takes precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stages: Option<usize>,
    pub fusion: Option<FusionStrategy>,
    pub epsilons: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(root) = &o.dataset_root {
            self.dataset_root = root.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = Some(out.clone());
        }
        if let Some(k) = o.stages {
            self.stages = k;
        }
        if let Some(f) = o.fusion {
            self.fusion = f;
        }
        if let Some(e) = &o.epsilons {
            self.epsilons = e.clone();
        }
    }

    pub fn hyperparams_for(&self, spec: &BackboneSpec) -> StageHyperparams {
        spec.hyperparams
            .clone()
            .or_else(|| self.hyperparams.clone())
            .unwrap_or_else(|| StageHyperparams::for_architecture(&spec.architecture))
    }

    pub fn output_dir(&self) -> CliResult<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("output_dir: not set (use --out)".into()))
    }

    /// Checks every field and reports the first problem by field path.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if !self.dataset_root.is_dir() {
            return bad("dataset_root", &format!("{} is not a directory", self.dataset_root.display()));
        }
        if self.backbones.is_empty() {
            return bad("backbones", "at least one backbone is required");
        }
        let mut names = BTreeSet::new();
        for (i, b) in self.backbones.iter().enumerate() {
            let field = format!("backbones[{i}]");
            let safe = !b.name.is_empty()
                && b.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                && b.name != "ensemble";
            if !safe {
                return bad(&format!("{field}.name"), "use letters, digits, '-' or '_' (and not \"ensemble\")");
            }
            if !names.insert(b.name.as_str()) {
                return bad(&format!("{field}.name"), &format!("duplicate name {}", b.name));
            }
            if let Err(e) = b.architecture.validate() {
                return bad(&format!("{field}.architecture"), &e.to_string());
            }
            if let Some(a) = &b.augment {
                if let Err(e) = a.validate() {
                    return bad(&format!("{field}.augment"), &e.to_string());
                }
            }
            if let Err(e) = self.hyperparams_for(b).validate() {
                return bad(&format!("{field}.hyperparams"), &e.to_string());
            }
        }
        if self.stages == 0 {
            return bad("stages", "must be at least 1");
        }
        if let Err(e) = grid_steps(self.fusion_step) {
            return bad("fusion_step", &e.to_string());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if self.epsilons.is_empty() {
            return bad("epsilons", "at least one value is required");
        }
        if let Some(i) = self.epsilons.iter().position(|e| !(*e >= 0.0 && e.is_finite())) {
            return bad(&format!("epsilons[{i}]"), "must be a non-negative number");
        }
        let adv = &self.adversarial;
        if !(adv.epsilon >= 0.0 && adv.epsilon.is_finite()) {
            return bad("adversarial.epsilon", "must be non-negative");
        }
        if !(adv.lr >= 0.0 && adv.lr.is_finite()) {
            return bad("adversarial.lr", "must be non-negative");
        }
        if adv.clean_per_batch == 0 {
            return bad("adversarial.clean_per_batch", "must be positive");
        }
        Ok(())
    }

    /// The config as stored inside a run: no output directory, so the copy
    /// does not depend on where the run lives.
    pub fn for_record(&self) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: None,
            ..self.clone()
        }
    }
}
