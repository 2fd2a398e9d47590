//! Subcommand implementations. Each returns what it wrote so callers and
//! tests can inspect results without re-reading files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use deepfake_core::adversarial::{
    adversarial_train, robustness_sweep, AdversarialTrainConfig, FusionSpec, RobustnessTable, SweepMember,
};
use deepfake_core::backbones::checkpoint::{self, CheckpointMeta};
use deepfake_core::backbones::train::TensorSet;
use deepfake_core::backbones::{predict_proba, Backbone};
use deepfake_core::data::{scan_split, ImageStore, Preprocessor, Sample};
use deepfake_core::ensemble::{FusionReport, FusionStrategy, FusionWeights};
use deepfake_core::imagecore::load_image;
use deepfake_core::seeding::{derive_seed, tag};
use deepfake_core::staging::{
    partition_fakes, run_multistage, stage_stem, write_log_csv, PartitionManifest, PreparedSource, RunOptions,
    StageRecord,
};
use deepfake_core::synth::{write_dataset, SynthConfig};
use deepfake_core::wavelet::wavelet_feature_image;
use serde::Serialize;

use crate::config::{BackboneSpec, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{self, ManifestDiff, RunLock, RunManifest};
use crate::plots;
use crate::report::{self, EvalReport, EvalSettings, PredictionTable};

pub const RUN_CONFIG: &str = "run_config.json";
pub const PARTITION: &str = "partition.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const FUSION_REPORT: &str = "fusion_report.json";
pub const ROC_CSV: &str = "roc.csv";
pub const ADVERSARIAL_STEM: &str = "adversarial";

pub fn checkpoint_dir(run: &Path, backbone: &str) -> PathBuf {
    run.join(backbone).join("checkpoints")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Decoded split images, one store per input size.
struct SplitImages {
    samples: Vec<Sample>,
    stores: BTreeMap<usize, ImageStore>,
}

impl SplitImages {
    fn scan(root: &Path, split: &str) -> CliResult<Self> {
        Ok(SplitImages {
            samples: scan_split(root, split)?,
            stores: BTreeMap::new(),
        })
    }

    fn store(&mut self, size: usize) -> CliResult<&ImageStore> {
        if !self.stores.contains_key(&size) {
            let store = ImageStore::load(&self.samples, size)?;
            self.stores.insert(size, store);
        }
        Ok(&self.stores[&size])
    }

    fn tensors(&mut self, spec: &BackboneSpec) -> CliResult<TensorSet> {
        let pre = Preprocessor::new(spec.architecture.input_spec(), None)?;
        let store = self.store(pre.spec.height)?;
        Ok(pre.batch(store, &store.entries(), |_| None)?)
    }

    fn ids_and_labels(&self) -> (Vec<String>, Vec<u8>) {
        self.samples.iter().map(|s| (s.id.clone(), s.label)).unzip()
    }
}

fn check_recorded<T: Serialize + serde::de::DeserializeOwned + PartialEq>(
    path: &Path,
    value: &T,
    what: &str,
) -> CliResult<()> {
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let recorded: T = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
        if &recorded != value {
            return Err(CliError::Config(format!(
                "{} records a different {what}; use a fresh output directory",
                path.display()
            )));
        }
    }
    write_json(path, value)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub partition: PartitionManifest,
    pub stages: BTreeMap<String, Vec<StageRecord>>,
}

/// Partitions the fake pool, then trains every backbone through all stages,
/// resuming from stage checkpoints already in the run directory.
pub fn train(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let run = cfg.output_dir()?.to_path_buf();
    let _lock = RunLock::acquire(&run)?;
    check_recorded(&run.join(RUN_CONFIG), &cfg.for_record(), "configuration")?;

    let mut train_images = SplitImages::scan(&cfg.dataset_root, "train")?;
    let mut val_images = SplitImages::scan(&cfg.dataset_root, "val")?;
    let (ids, labels) = train_images.ids_and_labels();
    let real: Vec<String> = ids.iter().zip(&labels).filter(|(_, &y)| y == 0).map(|(i, _)| i.clone()).collect();
    let fake: Vec<String> = ids.iter().zip(&labels).filter(|(_, &y)| y == 1).map(|(i, _)| i.clone()).collect();
    let plan = partition_fakes(real, &fake, cfg.stages, derive_seed(cfg.seed, &[tag("partition")]))?;
    let partition = plan.manifest();
    check_recorded(&run.join(PARTITION), &partition, "partition")?;
    log::info!(
        "partitioned {} fakes into {} subsets against {} reals",
        fake.len(),
        cfg.stages,
        partition.real_count
    );

    let mut stages = BTreeMap::new();
    for spec in &cfg.backbones {
        let val = val_images.tensors(spec)?;
        let pre = Preprocessor::new(spec.architecture.input_spec(), spec.augment.clone())?;
        let store = train_images.store(pre.spec.height)?;
        let train_seed = derive_seed(cfg.seed, &[tag("train"), tag(&spec.name)]);
        let source = PreparedSource::new(store, pre, val, train_seed);
        let backbone = Backbone::new(
            spec.name.clone(),
            spec.architecture.clone(),
            derive_seed(cfg.seed, &[tag("init"), tag(&spec.name)]),
        )?;
        let dir = checkpoint_dir(&run, &spec.name);
        let outcome = run_multistage(
            backbone,
            &plan,
            &cfg.hyperparams_for(spec),
            &source,
            &RunOptions {
                checkpoint_dir: Some(&dir),
                resume: true,
                seed: train_seed,
            },
        )?;
        write_log_csv(&run.join(&spec.name).join("train_log.csv"), &outcome.log)?;
        write_json(&run.join(&spec.name).join("stages.json"), &outcome.stages)?;
        for s in &outcome.stages {
            log::info!(
                "{} stage {}: {} -> {}{}",
                spec.name,
                s.stage,
                &s.start_hash[..12],
                &s.end_hash[..12],
                if s.resumed { " (resumed)" } else { "" }
            );
        }
        stages.insert(spec.name.clone(), outcome.stages);
    }
    RunManifest::refresh(&run)?;
    Ok(TrainSummary { partition, stages })
}

fn load_final(run: &Path, spec: &BackboneSpec, stem: &str) -> CliResult<(Backbone, CheckpointMeta)> {
    let dir = checkpoint_dir(run, &spec.name);
    if !checkpoint::sidecar_path(&dir, stem).exists() || !checkpoint::blob_path(&dir, stem).exists() {
        return Err(CliError::MissingCheckpoint(format!(
            "{} has no {stem} checkpoint in {} (run train first)",
            spec.name,
            dir.display()
        )));
    }
    let (b, meta) = checkpoint::load(&dir, stem).map_err(|e| CliError::MissingCheckpoint(e.to_string()))?;
    if b.arch != spec.architecture {
        return Err(CliError::MissingCheckpoint(format!(
            "{}/{stem} was trained with a different architecture than configured",
            spec.name
        )));
    }
    Ok((b, meta))
}

fn final_stem(cfg: &ExperimentConfig) -> String {
    stage_stem(cfg.stages)
}

fn settings(cfg: &ExperimentConfig) -> EvalSettings {
    EvalSettings {
        strategy: cfg.fusion,
        step: cfg.fusion_step,
        objective: cfg.search_objective,
        threshold: cfg.threshold,
        alpha: cfg.alpha,
    }
}

/// Scores the final checkpoints on the validation split, or re-scores an
/// existing prediction CSV when `predictions` is given.
pub fn evaluate(cfg: &ExperimentConfig, predictions: Option<&Path>) -> CliResult<EvalReport> {
    cfg.validate()?;
    let run = cfg.output_dir()?.to_path_buf();
    let _lock = RunLock::acquire(&run)?;
    let table = match predictions {
        Some(path) => report::read_predictions(path)?,
        None => {
            let mut val = SplitImages::scan(&cfg.dataset_root, "val")?;
            let (ids, labels) = val.ids_and_labels();
            let mut probs = Vec::new();
            for spec in &cfg.backbones {
                let (b, _) = load_final(&run, spec, &final_stem(cfg))?;
                let set = val.tensors(spec)?;
                probs.push(predict_proba(&b, &set.inputs)?);
            }
            PredictionTable {
                models: cfg.backbones.iter().map(|b| b.name.clone()).collect(),
                ids,
                labels,
                probs,
            }
        }
    };
    let ev = report::evaluate_table(&table, &settings(cfg))?;
    report::write_predictions(&run.join(PREDICTIONS), &table, &ev.fused, cfg.threshold)?;
    write_json(&run.join(EVAL_REPORT), &ev.report)?;
    write_json(&run.join(FUSION_REPORT), &ev.fusion)?;
    report::write_roc_csv(&run.join(ROC_CSV), &ev.roc)?;
    let plot_dir = run.join("plots");
    ensure_dir(&plot_dir)?;
    plots::write_roc(&plot_dir.join("roc.png"), &ev.roc)?;
    plots::write_confusion(&plot_dir.join("confusion.png"), &ev.report.ensemble.confusion)?;
    RunManifest::refresh(&run)?;
    Ok(ev.report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub before: RobustnessTable,
    pub after: Option<RobustnessTable>,
}

fn fusion_specs(cfg: &ExperimentConfig, run: &Path, val_probs: &[Vec<f64>], labels: &[u8]) -> CliResult<Vec<FusionSpec>> {
    let n = cfg.backbones.len();
    let weights = match cfg.fusion {
        FusionStrategy::Optimized => {
            let path = run.join(FUSION_REPORT);
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                let r: FusionReport = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
                r.weights
            } else {
                let table = PredictionTable {
                    models: cfg.backbones.iter().map(|b| b.name.clone()).collect(),
                    ids: (0..labels.len()).map(|i| i.to_string()).collect(),
                    labels: labels.to_vec(),
                    probs: val_probs.to_vec(),
                };
                report::evaluate_table(&table, &settings(cfg))?.fusion.weights
            }
        }
        _ => FusionWeights::equal(n),
    };
    if weights.len() != n {
        return Err(CliError::Config(format!(
            "{FUSION_REPORT} holds {} weights for {n} backbones",
            weights.len()
        )));
    }
    Ok(vec![
        FusionSpec {
            name: "weighted_ensemble".into(),
            strategy: if cfg.fusion == FusionStrategy::Equal {
                FusionStrategy::Equal
            } else {
                FusionStrategy::Optimized
            },
            weights,
        },
        FusionSpec {
            name: "majority_voting".into(),
            strategy: FusionStrategy::Majority,
            weights: FusionWeights::equal(n),
        },
    ])
}

fn write_table(run: &Path, stem: &str, t: &RobustnessTable) -> CliResult<()> {
    let csv = run.join(format!("{stem}.csv"));
    fs::write(&csv, t.to_csv()).map_err(|e| CliError::io(&csv, e))?;
    write_json(&run.join(format!("{stem}.json")), t)
}

/// FGSM sweep over the configured ε values. With `adversarial`, every
/// backbone is then fine-tuned on mixed clean/FGSM batches, saved as an
/// extra checkpoint, and swept again with ε = 0 added.
pub fn attack(cfg: &ExperimentConfig, adversarial: bool) -> CliResult<AttackOutcome> {
    cfg.validate()?;
    let run = cfg.output_dir()?.to_path_buf();
    let _lock = RunLock::acquire(&run)?;
    let mut val = SplitImages::scan(&cfg.dataset_root, "val")?;
    let (_, labels) = val.ids_and_labels();
    let mut models = Vec::new();
    let mut inputs = Vec::new();
    let mut ranges = Vec::new();
    for spec in &cfg.backbones {
        let (b, _) = load_final(&run, spec, &final_stem(cfg))?;
        let pre = Preprocessor::new(spec.architecture.input_spec(), None)?;
        ranges.push(pre.stats.normalized_range());
        inputs.push(val.tensors(spec)?.inputs);
        models.push(b);
    }
    let sweep = |models: &[Backbone], epsilons: &[f64]| -> CliResult<RobustnessTable> {
        let clean: Vec<Vec<f64>> = models
            .iter()
            .zip(&inputs)
            .map(|(b, x)| predict_proba(b, x))
            .collect::<Result<_, _>>()?;
        let fusions = fusion_specs(cfg, &run, &clean, &labels)?;
        let members: Vec<SweepMember> = models
            .iter()
            .zip(&inputs)
            .zip(&ranges)
            .map(|((b, x), r)| SweepMember {
                backbone: b,
                inputs: x,
                clamp_range: r.clone(),
            })
            .collect();
        Ok(robustness_sweep(&members, &labels, &fusions, epsilons, cfg.threshold)?)
    };

    let before = sweep(&models, &cfg.epsilons)?;
    if !adversarial {
        write_table(&run, "robustness", &before)?;
        RunManifest::refresh(&run)?;
        return Ok(AttackOutcome { before, after: None });
    }
    write_table(&run, "robustness_before", &before)?;

    let mut train_images = SplitImages::scan(&cfg.dataset_root, "train")?;
    let adv = &cfg.adversarial;
    for ((spec, b), range) in cfg.backbones.iter().zip(models.iter_mut()).zip(&ranges) {
        let data = train_images.tensors(spec)?;
        let tcfg = AdversarialTrainConfig {
            epsilon: adv.epsilon,
            epochs: adv.epochs,
            lr: adv.lr,
            clean_per_batch: adv.clean_per_batch,
            clamp_range: range.clone(),
            seed: derive_seed(cfg.seed, &[tag("adversarial"), tag(&spec.name)]),
        };
        let losses = adversarial_train(b, &data.inputs, &data.labels, &tcfg)?;
        log::info!("{} adversarial fine-tuning losses {losses:?}", spec.name);
        let (_, base) = load_final(&run, spec, &final_stem(cfg))?;
        let meta = CheckpointMeta {
            epoch: adv.epochs,
            parameter_count: b.params.scalar_count(),
            content_hash: b.params.content_hash(),
            lr: adv.lr,
            history: Vec::new(),
            ..base
        };
        checkpoint::save(&checkpoint_dir(&run, &spec.name), ADVERSARIAL_STEM, b, &meta)?;
    }
    let mut epsilons = vec![0.0];
    epsilons.extend(cfg.epsilons.iter().copied().filter(|e| *e != 0.0));
    let after = sweep(&models, &epsilons)?;
    write_table(&run, "robustness_after", &after)?;
    RunManifest::refresh(&run)?;
    Ok(AttackOutcome {
        before,
        after: Some(after),
    })
}

/// Writes the tiled sub-band image of one file, or of every PNG/JPEG in a
/// directory, as `<stem>_wavelet.png` under `out`.
pub fn extract_wavelet(input: &Path, out: &Path, size: usize) -> CliResult<Vec<PathBuf>> {
    if size == 0 || size % 2 != 0 {
        return Err(CliError::Config("size: must be a positive even number".into()));
    }
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| CliError::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    ensure_dir(out)?;
    let mut written = Vec::with_capacity(files.len());
    for f in files {
        let img = load_image(&f, size)?;
        let tile = wavelet_feature_image(&img, size)?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = out.join(format!("{stem}_wavelet.png"));
        tile.to_rgb8()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> CliResult<()> {
    Ok(write_dataset(cfg, root)?)
}

pub fn verify_run(run: &Path) -> CliResult<ManifestDiff> {
    manifest::verify(run)
}
