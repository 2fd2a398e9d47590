//! Multistage training over disjoint fake subsets.
//!
//! Fakes are split into `k` disjoint subsets. Stage `i` trains on every real
//! image plus subset `i`, starting from the parameters stage `i − 1` ended
//! with. One checkpoint is written per stage.

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::checkpoint::{self, CheckpointMeta};
use crate::backbones::optim::{Adam, AdamConfig};
use crate::backbones::train::{self, EpochConfig, EpochRecord, Objective, TensorSet};
use crate::backbones::{Architecture, Backbone};
use crate::data::{ImageStore, Preprocessor};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_for, tag};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub real_ids: Vec<String>,
    pub fake_subsets: Vec<Vec<String>>,
    pub k: usize,
    pub seed: u64,
}

/// Seeded shuffle of the fakes followed by a round-robin split into `k`
/// subsets.
pub fn partition_fakes(real_ids: Vec<String>, fake_ids: &[String], k: usize, seed: u64) -> Result<StagePlan> {
    if k == 0 {
        return Err(Error::invalid_config("stage count must be at least 1"));
    }
    if fake_ids.is_empty() {
        return Err(Error::invalid_input("no fake images to partition"));
    }
    if k > fake_ids.len() {
        return Err(Error::invalid_config(format!(
            "{k} stages but only {} fake images",
            fake_ids.len()
        )));
    }
    let mut shuffled = fake_ids.to_vec();
    shuffled.shuffle(&mut rng_for(seed, &[tag("partition")]));
    let mut fake_subsets = vec![Vec::with_capacity(fake_ids.len() / k + 1); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        fake_subsets[i % k].push(id);
    }
    let plan = StagePlan {
        real_ids,
        fake_subsets,
        k,
        seed,
    };
    plan.validate()?;
    Ok(plan)
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.fake_subsets.len() != self.k {
            return Err(Error::invalid_config("plan stage count does not match its subsets"));
        }
        let sizes: Vec<usize> = self.fake_subsets.iter().map(Vec::len).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if hi - lo > 1 {
            return Err(Error::invalid_config("fake subset sizes differ by more than one"));
        }
        let mut seen = HashSet::new();
        if !self.fake_subsets.iter().flatten().all(|id| seen.insert(id)) {
            return Err(Error::invalid_config("fake subsets overlap"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> PartitionManifest {
        let mut h = Sha256::new();
        for (i, subset) in self.fake_subsets.iter().enumerate() {
            for id in subset {
                h.update(format!("{i}\t{id}\n"));
            }
        }
        PartitionManifest {
            seed: self.seed,
            k: self.k,
            real_count: self.real_ids.len(),
            subset_sizes: self.fake_subsets.iter().map(Vec::len).collect(),
            id_list_hash: hex::encode(h.finalize()),
            subsets: self.fake_subsets.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub seed: u64,
    pub k: usize,
    pub real_count: usize,
    pub subset_sizes: Vec<usize>,
    /// SHA-256 over `stage\tid` lines of every subset.
    pub id_list_hash: String,
    pub subsets: Vec<Vec<String>>,
}

/// Every real id plus fake subset `stage` (1-based), labeled and shuffled
/// with a stage-derived seed.
pub fn build_stage_dataset(plan: &StagePlan, stage: usize) -> Result<Vec<(String, u8)>> {
    if stage == 0 || stage > plan.k {
        return Err(Error::invalid_input(format!("stage {stage} outside 1..={}", plan.k)));
    }
    let mut entries: Vec<(String, u8)> = plan
        .real_ids
        .iter()
        .map(|id| (id.clone(), 0))
        .chain(plan.fake_subsets[stage - 1].iter().map(|id| (id.clone(), 1)))
        .collect();
    entries.shuffle(&mut rng_for(plan.seed, &[tag("stage"), stage as u64]));
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMonitor {
    #[default]
    ValLoss,
    ValAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    #[serde(default)]
    pub monitor: PlateauMonitor,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 3,
            monitor: PlateauMonitor::ValLoss,
        }
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve on the best monitored value.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    cfg: PlateauConfig,
    best: Option<f64>,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(cfg: PlateauConfig) -> Self {
        ReduceOnPlateau {
            cfg,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's monitored value and returns the next learning rate.
    pub fn step(&mut self, value: f64, lr: f64) -> f64 {
        let improved = match (self.best, self.cfg.monitor) {
            (None, _) => true,
            (Some(b), PlateauMonitor::ValLoss) => value < b,
            (Some(b), PlateauMonitor::ValAccuracy) => value > b,
        };
        if improved {
            self.best = Some(value);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.bad_epochs = 0;
            lr * self.cfg.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    /// Every stage restarts at the initial learning rate.
    #[default]
    Rewarm,
    /// Each stage continues at the rate the previous stage ended with.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHyperparams {
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    #[serde(default)]
    pub plateau: PlateauConfig,
    #[serde(default)]
    pub lr_policy: LrPolicy,
    /// Also write a checkpoint after every epoch.
    #[serde(default)]
    pub checkpoint_every_epoch: bool,
}

impl StageHyperparams {
    /// Table defaults: 5 epochs for the convolutional and attention
    /// backbones, 4 for the wavelet one.
    pub fn for_architecture(arch: &Architecture) -> Self {
        let epochs = match arch {
            Architecture::WaveNext(_) => 4,
            _ => 5,
        };
        StageHyperparams {
            epochs_per_stage: epochs,
            batch_size: 32,
            initial_lr: 1e-4,
            plateau: PlateauConfig::default(),
            lr_policy: LrPolicy::Rewarm,
            checkpoint_every_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_stage == 0 || self.batch_size == 0 || self.plateau.patience == 0 {
            return Err(Error::invalid_config("epochs, batch size and patience must be positive"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid_config("initial learning rate must be positive"));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::invalid_config("plateau factor must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Supplies preprocessed tensors to the stage loop.
pub trait StageSource {
    /// Training tensors for `entries` in the given order.
    fn train_set(&self, stage: usize, epoch: usize, entries: &[(String, u8)]) -> Result<TensorSet>;
    fn val_set(&self) -> &TensorSet;
}

/// Images held in memory and turned into tensors by a [`Preprocessor`].
/// Augmentation draws are seeded by `(stage, epoch, position)`.
pub struct PreparedSource<'a> {
    pub store: &'a ImageStore,
    pub preprocessor: Preprocessor,
    pub val: TensorSet,
    pub seed: u64,
    cache: RefCell<Option<(usize, TensorSet)>>,
}

impl<'a> PreparedSource<'a> {
    pub fn new(store: &'a ImageStore, preprocessor: Preprocessor, val: TensorSet, seed: u64) -> Self {
        PreparedSource {
            store,
            preprocessor,
            val,
            seed,
            cache: RefCell::new(None),
        }
    }
}

impl StageSource for PreparedSource<'_> {
    fn train_set(&self, stage: usize, epoch: usize, entries: &[(String, u8)]) -> Result<TensorSet> {
        if self.preprocessor.augment.is_none() {
            if let Some((s, set)) = self.cache.borrow().as_ref() {
                if *s == stage && set.len() == entries.len() {
                    return Ok(set.clone());
                }
            }
            let set = self.preprocessor.batch(self.store, entries, |_| None)?;
            *self.cache.borrow_mut() = Some((stage, set.clone()));
            return Ok(set);
        }
        let seed = self.seed;
        self.preprocessor.batch(self.store, entries, |i| {
            Some(derive_seed(seed, &[tag("augment"), stage as u64, epoch as u64, i as u64]))
        })
    }

    fn val_set(&self) -> &TensorSet {
        &self.val
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Where stage checkpoints go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<&'a Path>,
    /// Reuse stage checkpoints already present in `checkpoint_dir`.
    pub resume: bool,
    /// Base seed for epoch shuffles.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub stem: String,
    pub start_hash: String,
    pub end_hash: String,
    pub end_lr: f64,
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct MultistageOutcome {
    pub backbone: Backbone,
    pub stages: Vec<StageRecord>,
    pub log: Vec<EpochRecord>,
}

pub fn stage_stem(stage: usize) -> String {
    format!("stage_{stage}")
}

fn aborted(stage: usize, last_durable: Option<usize>, e: Error) -> Error {
    log::error!("stage {stage} aborted; last durable checkpoint: {last_durable:?}");
    Error::StageAborted {
        stage,
        last_durable,
        source: Box::new(e),
    }
}

fn try_resume(dir: &Path, stage: usize, backbone: &Backbone) -> Result<Option<(Backbone, CheckpointMeta)>> {
    let stem = stage_stem(stage);
    if !checkpoint::sidecar_path(dir, &stem).exists() {
        return Ok(None);
    }
    let (loaded, meta) = checkpoint::load(dir, &stem)?;
    if loaded.name != backbone.name || loaded.arch != backbone.arch {
        return Err(Error::Checkpoint(format!(
            "{} belongs to a different backbone ({})",
            stem, loaded.name
        )));
    }
    Ok(Some((loaded, meta)))
}

/// Trains `backbone` through every stage of `plan`, warm-starting each stage
/// from the previous stage's final parameters.
pub fn run_multistage(
    mut backbone: Backbone,
    plan: &StagePlan,
    hp: &StageHyperparams,
    source: &dyn StageSource,
    opts: &RunOptions<'_>,
) -> Result<MultistageOutcome> {
    plan.validate()?;
    hp.validate()?;
    let init_seed = derive_seed(opts.seed, &[tag("init")]);
    let mut stages = Vec::with_capacity(plan.k);
    let mut log = Vec::new();
    let mut lr = hp.initial_lr;
    let mut last_durable = None;

    for stage in 1..=plan.k {
        let stem = stage_stem(stage);
        if let (Some(dir), true) = (opts.checkpoint_dir, opts.resume) {
            if let Some((loaded, meta)) = try_resume(dir, stage, &backbone)? {
                let start_hash = backbone.params.content_hash();
                backbone = loaded;
                lr = meta.lr;
                log.extend(meta.history.iter().copied());
                last_durable = Some(stage);
                stages.push(StageRecord {
                    stage,
                    stem,
                    start_hash,
                    end_hash: meta.content_hash,
                    end_lr: meta.lr,
                    resumed: true,
                });
                continue;
            }
        }
        // Warm start from the durable copy of the previous stage.
        if let (Some(dir), true) = (opts.checkpoint_dir, stage > 1) {
            let (prev, _) = checkpoint::load(dir, &stage_stem(stage - 1)).map_err(|e| aborted(stage, last_durable, e))?;
            backbone = prev;
        }
        let start_hash = backbone.params.content_hash();
        if hp.lr_policy == LrPolicy::Rewarm {
            lr = hp.initial_lr;
        }
        let mut opt = Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        let mut sched = ReduceOnPlateau::new(hp.plateau);
        let entries = build_stage_dataset(plan, stage)?;
        let mut history = Vec::with_capacity(hp.epochs_per_stage);

        for epoch in 1..=hp.epochs_per_stage {
            let data = source.train_set(stage, epoch, &entries)?;
            let cfg = EpochConfig {
                batch_size: hp.batch_size,
                shuffle_seed: derive_seed(opts.seed, &[tag("epoch"), stage as u64, epoch as u64]),
            };
            let epoch_lr = opt.lr();
            let tr = train::train_epoch(&mut backbone, &mut opt, &data, &cfg, Objective::CrossEntropy)?;
            let val = train::evaluate(&backbone, source.val_set())?;
            let record = EpochRecord {
                stage,
                epoch,
                lr: epoch_lr,
                train_loss: tr.mean_loss,
                train_acc: tr.accuracy,
                val_loss: val.mean_loss,
                val_acc: val.accuracy,
            };
            log::info!(
                "{} stage {stage} epoch {epoch}: lr {epoch_lr:.2e} train loss {:.4} acc {:.4} val loss {:.4} acc {:.4}",
                backbone.name,
                tr.mean_loss,
                tr.accuracy,
                val.mean_loss,
                val.accuracy
            );
            history.push(record);
            let monitored = match hp.plateau.monitor {
                PlateauMonitor::ValLoss => val.mean_loss,
                PlateauMonitor::ValAccuracy => val.accuracy,
            };
            opt.set_lr(sched.step(monitored, epoch_lr));
            if let (Some(dir), true) = (opts.checkpoint_dir, hp.checkpoint_every_epoch) {
                let meta = meta_for(&backbone, stage, epoch, init_seed, opt.lr(), vec![record]);
                checkpoint::save(dir, &format!("{stem}_epoch_{epoch}"), &backbone, &meta)
                    .map_err(|e| aborted(stage, last_durable, e))?;
            }
        }
        lr = opt.lr();
        let end_hash = backbone.params.content_hash();
        if let Some(dir) = opts.checkpoint_dir {
            let meta = meta_for(&backbone, stage, hp.epochs_per_stage, init_seed, lr, history.clone());
            checkpoint::save(dir, &stem, &backbone, &meta).map_err(|e| aborted(stage, last_durable, e))?;
            last_durable = Some(stage);
        }
        log.extend(history);
        stages.push(StageRecord {
            stage,
            stem,
            start_hash,
            end_hash,
            end_lr: lr,
            resumed: false,
        });
    }
    Ok(MultistageOutcome { backbone, stages, log })
}

fn meta_for(b: &Backbone, stage: usize, epoch: usize, seed: u64, lr: f64, history: Vec<EpochRecord>) -> CheckpointMeta {
    CheckpointMeta {
        backbone: b.name.clone(),
        architecture: b.arch.clone(),
        stage,
        epoch,
        seed,
        parameter_count: b.params.scalar_count(),
        content_hash: b.params.content_hash(),
        lr,
        history,
    }
}

/// Writes the training log as CSV with one row per epoch.
pub fn write_log_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in log {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::LogisticConfig;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn partition_examples() {
        let plan = partition_fakes(ids("r", 4), &ids("f", 10), 5, 1).unwrap();
        assert!(plan.fake_subsets.iter().all(|s| s.len() == 2));
        let mut all: Vec<_> = plan.fake_subsets.concat();
        all.sort();
        let mut want = ids("f", 10);
        want.sort();
        assert_eq!(all, want);
        assert_eq!(plan, partition_fakes(ids("r", 4), &ids("f", 10), 5, 1).unwrap());
        assert_ne!(plan.fake_subsets, partition_fakes(ids("r", 4), &ids("f", 10), 5, 2).unwrap().fake_subsets);
        assert!(matches!(partition_fakes(vec![], &ids("f", 3), 4, 0), Err(Error::InvalidConfig(_))));
        assert!(partition_fakes(vec![], &[], 1, 0).is_err());
    }

    #[test]
    fn full_scale_partition_sizes() {
        let plan = partition_fakes(ids("r", 3), &ids("f", 219_470), 5, 42).unwrap();
        assert_eq!(plan.fake_subsets.iter().map(Vec::len).collect::<Vec<_>>(), vec![43_894; 5]);
        let reals = ids("r", 42_690);
        let plan = StagePlan { real_ids: reals, ..plan };
        assert_eq!(build_stage_dataset(&plan, 3).unwrap().len(), 86_584);
    }

    #[test]
    fn stage_datasets() {
        let plan = partition_fakes(ids("r", 4), &ids("f", 25), 5, 3).unwrap();
        let d1 = build_stage_dataset(&plan, 1).unwrap();
        assert_eq!(d1.len(), 9);
        assert_eq!(d1.iter().filter(|e| e.1 == 0).count(), 4);
        let fakes = |d: &[(String, u8)]| d.iter().filter(|e| e.1 == 1).map(|e| e.0.clone()).collect::<HashSet<_>>();
        for i in 1..=5 {
            for j in i + 1..=5 {
                let a = fakes(&build_stage_dataset(&plan, i).unwrap());
                let b = fakes(&build_stage_dataset(&plan, j).unwrap());
                assert!(a.is_disjoint(&b));
            }
        }
        assert!(matches!(build_stage_dataset(&plan, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(build_stage_dataset(&plan, 6), Err(Error::InvalidInput(_))));
        let reals = |d: &[(String, u8)]| d.iter().filter(|e| e.1 == 0).map(|e| e.0.clone()).collect::<Vec<_>>();
        assert_ne!(reals(&d1), reals(&build_stage_dataset(&plan, 2).unwrap()));
    }

    #[test]
    fn plateau_reduces_after_patience_bad_epochs() {
        let mut s = ReduceOnPlateau::new(PlateauConfig::default());
        let mut lr = 1e-4;
        for v in [1.0, 0.9, 0.95, 0.95] {
            lr = s.step(v, lr);
            assert_eq!(lr, 1e-4);
        }
        lr = s.step(0.91, lr);
        assert_eq!(lr, 1e-4 * 0.1);
        // Counter restarts after a reduction.
        for _ in 0..2 {
            lr = s.step(0.99, lr);
            assert_eq!(lr, 1e-5);
        }
        assert_eq!(s.step(0.99, lr), 1e-5 * 0.1);
        let mut acc = ReduceOnPlateau::new(PlateauConfig {
            monitor: PlateauMonitor::ValAccuracy,
            ..Default::default()
        });
        assert_eq!(acc.step(0.5, 1.0), 1.0);
        assert_eq!(acc.step(0.6, 1.0), 1.0);
    }

    #[test]
    fn hyperparameter_defaults_and_validation() {
        use crate::backbones::{SeConvConfig, WaveNextConfig};
        let w = StageHyperparams::for_architecture(&Architecture::WaveNext(WaveNextConfig::default()));
        assert_eq!(w.epochs_per_stage, 4);
        let c = StageHyperparams::for_architecture(&Architecture::SeConv(SeConvConfig::default()));
        assert_eq!((c.epochs_per_stage, c.batch_size, c.initial_lr), (5, 32, 1e-4));
        assert!(c.validate().is_ok());
        let bad = StageHyperparams {
            plateau: PlateauConfig {
                factor: 1.0,
                ..Default::default()
            },
            ..c
        };
        assert!(bad.validate().is_err());
    }

    struct Toy {
        data: std::collections::HashMap<String, (Vec<f64>, u8)>,
        val: TensorSet,
    }

    impl StageSource for Toy {
        fn train_set(&self, _: usize, _: usize, entries: &[(String, u8)]) -> Result<TensorSet> {
            let flat: Vec<f64> = entries.iter().flat_map(|(id, _)| self.data[id].0.clone()).collect();
            TensorSet::new(
                ArrayD::from_shape_vec(IxDyn(&[entries.len(), 1, 1, 2]), flat).unwrap(),
                entries.iter().map(|e| e.1).collect(),
            )
        }

        fn val_set(&self) -> &TensorSet {
            &self.val
        }
    }

    fn toy(reals: usize, fakes: usize) -> (Toy, Vec<String>, Vec<String>) {
        let mut rng = rng_for(0, &[]);
        let mut data = std::collections::HashMap::new();
        let mut point = |y: u8| {
            let c = if y == 1 { 0.8 } else { -0.8 };
            (vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], y)
        };
        let (r, f) = (ids("r", reals), ids("f", fakes));
        for id in &r {
            data.insert(id.clone(), point(0));
        }
        for id in &f {
            data.insert(id.clone(), point(1));
        }
        let val_pts: Vec<(Vec<f64>, u8)> = (0..40).map(|i| point((i % 2) as u8)).collect();
        let val = TensorSet::new(
            ArrayD::from_shape_vec(IxDyn(&[40, 1, 1, 2]), val_pts.iter().flat_map(|p| p.0.clone()).collect()).unwrap(),
            val_pts.iter().map(|p| p.1).collect(),
        )
        .unwrap();
        (Toy { data, val }, r, f)
    }

    fn model() -> Backbone {
        Backbone::new(
            "toy",
            Architecture::Logistic(LogisticConfig {
                height: 1,
                width: 1,
                channels: 2,
            }),
            0,
        )
        .unwrap()
    }

    fn hp() -> StageHyperparams {
        StageHyperparams {
            epochs_per_stage: 5,
            batch_size: 8,
            initial_lr: 0.01,
            plateau: PlateauConfig::default(),
            lr_policy: LrPolicy::Rewarm,
            checkpoint_every_epoch: false,
        }
    }

    #[test]
    fn five_stages_warm_start_bit_exactly() {
        let (src, r, f) = toy(20, 100);
        let plan = partition_fakes(r, &f, 5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path()),
            resume: false,
            seed: 1,
        };
        let out = run_multistage(model(), &plan, &hp(), &src, &opts).unwrap();
        assert_eq!(out.stages.len(), 5);
        assert_eq!(out.log.len(), 25);
        for w in out.stages.windows(2) {
            assert_eq!(w[0].end_hash, w[1].start_hash);
        }
        for s in 1..=5 {
            assert!(checkpoint::sidecar_path(dir.path(), &stage_stem(s)).exists());
        }
        assert_eq!(out.stages[4].end_hash, out.backbone.params.content_hash());
        let again = run_multistage(model(), &plan, &hp(), &src, &RunOptions { checkpoint_dir: None, ..opts }).unwrap();
        assert_eq!(again.log, out.log);
        assert_eq!(again.backbone, out.backbone);
    }

    #[test]
    fn resume_after_losing_last_stage_matches() {
        let (src, r, f) = toy(10, 50);
        let plan = partition_fakes(r, &f, 5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path()),
            resume: true,
            seed: 4,
        };
        let hp = StageHyperparams {
            lr_policy: LrPolicy::Continue,
            ..hp()
        };
        let full = run_multistage(model(), &plan, &hp, &src, &opts).unwrap();
        std::fs::remove_file(checkpoint::sidecar_path(dir.path(), "stage_5")).unwrap();
        let resumed = run_multistage(model(), &plan, &hp, &src, &opts).unwrap();
        assert_eq!(resumed.stages.iter().filter(|s| s.resumed).count(), 4);
        assert_eq!(resumed.backbone.params.content_hash(), full.backbone.params.content_hash());
        assert_eq!(resumed.log, full.log);
    }

    #[test]
    fn single_stage_uses_whole_pool() {
        let (src, r, f) = toy(10, 30);
        let plan = partition_fakes(r, &f, 1, 0).unwrap();
        assert_eq!(build_stage_dataset(&plan, 1).unwrap().len(), 40);
        let out = run_multistage(model(), &plan, &hp(), &src, &RunOptions::default()).unwrap();
        assert_eq!(out.log.len(), 5);
    }

    #[test]
    fn unwritable_checkpoint_dir_aborts_with_last_durable() {
        let (src, r, f) = toy(4, 10);
        let plan = partition_fakes(r, &f, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(&blocker),
            resume: false,
            seed: 0,
        };
        match run_multistage(model(), &plan, &hp(), &src, &opts) {
            Err(Error::StageAborted { stage: 1, last_durable: None, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_csv_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rec = EpochRecord {
            stage: 1,
            epoch: 2,
            lr: 1e-4,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: 0.6,
            val_acc: 0.7,
        };
        write_log_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("stage,epoch,lr,train_loss,train_acc,val_loss,val_acc\n1,2,"));
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 1usize..300, k in 1usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let plan = partition_fakes(vec![], &ids("f", n), k, seed).unwrap();
            let sizes: Vec<usize> = plan.fake_subsets.iter().map(Vec::len).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let all: HashSet<_> = plan.fake_subsets.iter().flatten().collect();
            prop_assert_eq!(all.len(), n);
        }
    }
}
