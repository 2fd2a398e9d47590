//! FGSM attacks, mixed clean/adversarial fine-tuning and robustness sweeps.

use std::fmt::Write as _;

use ndarray::{concatenate, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbones::graph::{self, Tensor};
use crate::backbones::optim::{Adam, AdamConfig};
use crate::backbones::train::{self, Objective};
use crate::backbones::{predict_proba, Backbone};
use crate::ensemble::{fuse_scores, FusionStrategy, FusionWeights};
use crate::error::{Error, Result};
use crate::imagecore::NormalizationStats;
use crate::seeding::{rng_for, tag};

const ATTACK_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Step size in normalized-input units.
    pub epsilon: f64,
    /// Valid `[lo, hi]` per input channel.
    pub clamp_range: Vec<(f64, f64)>,
}

impl AttackConfig {
    pub fn new(epsilon: f64, clamp_range: Vec<(f64, f64)>) -> Result<Self> {
        let cfg = AttackConfig { epsilon, clamp_range };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Clamps to the normalized image of `[0, 1]`.
    pub fn normalized(epsilon: f64, stats: &NormalizationStats) -> Result<Self> {
        AttackConfig::new(epsilon, stats.normalized_range())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid_config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.clamp_range.is_empty() || self.clamp_range.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid_config("clamp ranges must be non-empty intervals"));
        }
        Ok(())
    }
}

/// `clamp(x + ε · sign(∇ₓ J))` for a batch `x` of `[n, h, w, c]` inputs.
pub fn fgsm(backbone: &Backbone, x: &Tensor, labels: &[u8], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = backbone.check_batch(x)?;
    let c = x.shape()[3];
    if cfg.clamp_range.len() != c {
        return Err(Error::invalid_config(format!(
            "{} clamp ranges for {c} channels",
            cfg.clamp_range.len()
        )));
    }
    if labels.len() != n {
        return Err(Error::invalid_input("labels do not align with inputs"));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    let mut start = 0;
    while start < n {
        let end = (start + ATTACK_CHUNK).min(n);
        let chunk = graph::batch_range(x, start, end);
        let grad = train::input_gradient(backbone, &chunk, &labels[start..end])?;
        let mut view = out.slice_axis_mut(Axis(0), (start..end).into());
        for ch in 0..c {
            let (lo, hi) = cfg.clamp_range[ch];
            Zip::from(view.index_axis_mut(Axis(3), ch))
                .and(grad.index_axis(Axis(3), ch))
                .for_each(|v, &g| {
                    let step = if g > 0.0 {
                        cfg.epsilon
                    } else if g < 0.0 {
                        -cfg.epsilon
                    } else {
                        0.0
                    };
                    *v = (*v + step).clamp(lo, hi);
                });
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTrainConfig {
    pub epsilon: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Clean samples per batch; each is joined by its FGSM counterpart.
    pub clean_per_batch: usize,
    pub clamp_range: Vec<(f64, f64)>,
    pub seed: u64,
}

impl AdversarialTrainConfig {
    /// ε = 0.005, 6 epochs, learning rate 1e-5, 32 clean + 32 perturbed.
    pub fn standard(clamp_range: Vec<(f64, f64)>) -> Self {
        AdversarialTrainConfig {
            epsilon: 0.005,
            epochs: 6,
            lr: 1e-5,
            clean_per_batch: 32,
            clamp_range,
            seed: 0,
        }
    }
}

/// Fine-tunes on batches of clean samples plus FGSM versions regenerated
/// against the current parameters at every step. Returns per-epoch mean loss.
pub fn adversarial_train(
    backbone: &mut Backbone,
    inputs: &Tensor,
    labels: &[u8],
    cfg: &AdversarialTrainConfig,
) -> Result<Vec<f64>> {
    let attack = AttackConfig::new(cfg.epsilon, cfg.clamp_range.clone())?;
    if cfg.clean_per_batch == 0 {
        return Err(Error::invalid_config("batch size must be positive"));
    }
    let n = backbone.check_batch(inputs)?;
    if n != labels.len() || n == 0 {
        return Err(Error::invalid_input("adversarial training needs aligned, non-empty data"));
    }
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[tag("adversarial"), epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(cfg.clean_per_batch) {
            let clean = graph::batch_rows(inputs, idx);
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let adv = fgsm(backbone, &clean, &y, &attack)?;
            let mixed = concatenate(Axis(0), &[clean.view(), adv.view()]).expect("same sample shape");
            let mixed_y: Vec<u8> = y.iter().chain(&y).copied().collect();
            let (loss, grads, _) = train::batch_gradients(backbone, mixed, &mixed_y, Objective::CrossEntropy, &[])?;
            total += loss * idx.len() as f64;
            opt.step(&mut backbone.params, &grads);
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// One backbone of a sweep with its own preprocessed inputs.
pub struct SweepMember<'a> {
    pub backbone: &'a Backbone,
    pub inputs: &'a Tensor,
    pub clamp_range: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub name: String,
    pub strategy: FusionStrategy,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model: String,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub epsilons: Vec<f64>,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for e in &self.epsilons {
            write!(s, ",eps={e}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.model);
            for a in &r.accuracy {
                write!(s, ",{a}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn row(&self, model: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(p, &y)| (**p >= threshold) == (y == 1))
        .count();
    correct as f64 / labels.len() as f64
}

/// Accuracy of every member and fusion under FGSM at each ε. Each member is
/// attacked with its own gradient before fusion.
pub fn robustness_sweep(
    members: &[SweepMember<'_>],
    labels: &[u8],
    fusions: &[FusionSpec],
    epsilons: &[f64],
    threshold: f64,
) -> Result<RobustnessTable> {
    if members.is_empty() {
        return Err(Error::invalid_input("no models to attack"));
    }
    if epsilons.is_empty() {
        return Err(Error::invalid_config("no epsilon values"));
    }
    for f in fusions {
        if f.weights.len() != members.len() {
            return Err(Error::invalid_config(format!("fusion {} has the wrong weight count", f.name)));
        }
    }
    let mut rows: Vec<RobustnessRow> = members
        .iter()
        .map(|m| m.backbone.name.clone())
        .chain(fusions.iter().map(|f| f.name.clone()))
        .map(|model| RobustnessRow {
            model,
            accuracy: Vec::with_capacity(epsilons.len()),
        })
        .collect();
    for &eps in epsilons {
        let mut probs = Vec::with_capacity(members.len());
        for (i, m) in members.iter().enumerate() {
            let cfg = AttackConfig::new(eps, m.clamp_range.clone())?;
            let x = fgsm(m.backbone, m.inputs, labels, &cfg)?;
            let p = predict_proba(m.backbone, &x)?;
            rows[i].accuracy.push(accuracy(&p, labels, threshold));
            probs.push(p);
        }
        for (j, f) in fusions.iter().enumerate() {
            let fused = fuse_scores(&probs, f.strategy, &f.weights, threshold)?;
            rows[members.len() + j].accuracy.push(accuracy(&fused, labels, threshold));
        }
    }
    Ok(RobustnessTable {
        epsilons: epsilons.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{Architecture, LogisticConfig};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logistic(w: &[f64], b: f64) -> Backbone {
        let mut m = Backbone::new(
            "lin",
            Architecture::Logistic(LogisticConfig {
                height: 1,
                width: 1,
                channels: w.len(),
            }),
            0,
        )
        .unwrap();
        *m.params.get_mut("head.w").unwrap() = ArrayD::from_shape_vec(IxDyn(&[w.len(), 1]), w.to_vec()).unwrap();
        m.params.get_mut("head.b").unwrap().fill(b);
        m
    }

    fn batch(rows: &[Vec<f64>]) -> Tensor {
        let c = rows[0].len();
        ArrayD::from_shape_vec(IxDyn(&[rows.len(), 1, 1, c]), rows.concat()).unwrap()
    }

    fn wide(c: usize) -> Vec<(f64, f64)> {
        vec![(-10.0, 10.0); c]
    }

    #[test]
    fn closed_form_logistic_example() {
        let m = logistic(&[2.0, -1.0], 0.0);
        let x = batch(&[vec![0.5, 0.5]]);
        let eps = 0.1;
        let adv = fgsm(&m, &x, &[1], &AttackConfig::new(eps, wide(2)).unwrap()).unwrap();
        // ∇ₓ J = (σ(wᵀx) − 1)·w has signs (−, +).
        assert_eq!(adv[[0, 0, 0, 0]], 0.5 - eps);
        assert_eq!(adv[[0, 0, 0, 1]], 0.5 + eps);
    }

    #[test]
    fn zero_epsilon_is_identity_and_params_untouched() {
        let m = logistic(&[2.0, -1.0, 0.5], 0.3);
        let before = m.params.content_hash();
        let x = batch(&[vec![0.1, -0.2, 0.3], vec![-0.0, 0.7, 0.2]]);
        let same = fgsm(&m, &x, &[1, 0], &AttackConfig::new(0.0, wide(3)).unwrap()).unwrap();
        assert_eq!(same, x);
        fgsm(&m, &x, &[1, 0], &AttackConfig::new(0.2, wide(3)).unwrap()).unwrap();
        assert_eq!(m.params.content_hash(), before);
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        assert!(matches!(AttackConfig::new(-0.1, wide(1)), Err(Error::InvalidConfig(_))));
        let mut m = logistic(&[1.0], 0.0);
        let x = batch(&[vec![0.1]]);
        let cfg = AdversarialTrainConfig {
            epsilon: -1.0,
            ..AdversarialTrainConfig::standard(wide(1))
        };
        assert!(adversarial_train(&mut m, &x, &[1], &cfg).is_err());
    }

    #[test]
    fn perturbation_bounded_and_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = logistic(&[3.0, -2.0, 1.0, 0.5], 0.1);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = batch(&rows);
        let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        for eps in [0.001, 0.05, 0.5] {
            let cfg = AttackConfig::new(eps, vec![(-1.0, 1.0); 4]).unwrap();
            let adv = fgsm(&m, &x, &labels, &cfg).unwrap();
            Zip::from(&adv).and(&x).for_each(|a, b| {
                assert!((a - b).abs() <= eps * (1.0 + 1e-12));
                assert!((-1.0..=1.0).contains(a));
            });
        }
    }

    #[test]
    fn small_steps_raise_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = logistic(&[1.5, -0.7, 0.4], -0.2);
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..2)).collect();
        let x = batch(&rows);
        let adv = fgsm(&m, &x, &labels, &AttackConfig::new(1e-3, wide(3)).unwrap()).unwrap();
        let before = train::sample_losses(&m, &x, &labels).unwrap();
        let after = train::sample_losses(&m, &adv, &labels).unwrap();
        let rising = before.iter().zip(&after).filter(|(b, a)| a >= b).count();
        assert!(rising >= 950, "{rising}");
    }

    #[test]
    fn zero_epoch_training_is_a_no_op() {
        let mut m = logistic(&[1.0, 2.0], 0.0);
        let before = m.clone();
        let cfg = AdversarialTrainConfig {
            epochs: 0,
            ..AdversarialTrainConfig::standard(wide(2))
        };
        adversarial_train(&mut m, &batch(&[vec![0.1, 0.2]]), &[1], &cfg).unwrap();
        assert_eq!(m, before);
    }

    // Fake when the first coordinate is positive; the remaining coordinates
    // carry a weak copy of the label that a naive fit over-weights.
    fn fragile_set(n: usize, seed: u64) -> (Tensor, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let s = if y == 1 { 1.0 } else { -1.0 };
            let mut r = vec![s * rng.gen_range(0.5..1.0)];
            r.extend((0..20).map(|_| s * 0.02 + rng.gen_range(-0.01..0.01)));
            rows.push(r);
            labels.push(y);
        }
        (batch(&rows), labels)
    }

    #[test]
    fn adversarial_training_improves_attacked_accuracy() {
        let (x, y) = fragile_set(400, 3);
        let mut w = vec![0.5];
        w.extend(vec![3.0; 20]);
        let mut m = logistic(&w, 0.0);
        let attack = AttackConfig::new(0.03, wide(21)).unwrap();
        let acc_under = |m: &Backbone| {
            let adv = fgsm(m, &x, &y, &attack).unwrap();
            accuracy(&predict_proba(m, &adv).unwrap(), &y, 0.5)
        };
        let before = acc_under(&m);
        let cfg = AdversarialTrainConfig {
            epsilon: 0.03,
            lr: 0.01,
            epochs: 6,
            ..AdversarialTrainConfig::standard(wide(21))
        };
        let losses = adversarial_train(&mut m, &x, &y, &cfg).unwrap();
        assert_eq!(losses.len(), 6);
        assert!(acc_under(&m) > before, "{} vs {before}", acc_under(&m));
    }

    #[test]
    fn sweep_shapes_and_clean_column() {
        let (x, y) = fragile_set(60, 4);
        let mut w = vec![1.0];
        w.extend(vec![0.5; 20]);
        let models: Vec<Backbone> = (0..3)
            .map(|i| {
                let mut m = logistic(&w, 0.0);
                m.name = format!("m{i}");
                m
            })
            .collect();
        let members: Vec<SweepMember> = models
            .iter()
            .map(|b| SweepMember {
                backbone: b,
                inputs: &x,
                clamp_range: wide(21),
            })
            .collect();
        let fusions = vec![
            FusionSpec {
                name: "weighted".into(),
                strategy: FusionStrategy::Optimized,
                weights: FusionWeights::new(vec![0.35, 0.34, 0.31]).unwrap(),
            },
            FusionSpec {
                name: "majority".into(),
                strategy: FusionStrategy::Majority,
                weights: FusionWeights::equal(3),
            },
        ];
        let eps = [0.0, 0.005, 0.01, 0.03, 0.05];
        let t = robustness_sweep(&members, &y, &fusions, &eps, 0.5).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert!(t.rows.iter().all(|r| r.accuracy.len() == 5));
        let clean = accuracy(&predict_proba(&models[0], &x).unwrap(), &y, 0.5);
        assert_eq!(t.row("m0").unwrap().accuracy[0], clean);
        let csv = t.to_csv();
        assert!(csv.starts_with("model,eps=0,eps=0.005,eps=0.01,eps=0.03,eps=0.05\nm0,"));
        assert!(robustness_sweep(&[], &y, &fusions, &eps, 0.5).is_err());
    }

    #[test]
    fn majority_survives_one_collapsing_member() {
        let (x, y) = fragile_set(200, 5);
        // Two models read the robust coordinate; one leans on the fragile ones
        // with large, confident weights.
        let mut robust = vec![2.0];
        robust.extend(vec![0.0; 20]);
        let mut fragile = vec![0.1];
        fragile.extend(vec![40.0; 20]);
        let mut models = vec![logistic(&robust, 0.0), logistic(&fragile, 0.0), logistic(&robust, 0.0)];
        for (i, m) in models.iter_mut().enumerate() {
            m.name = format!("m{i}");
        }
        let members: Vec<SweepMember> = models
            .iter()
            .map(|b| SweepMember {
                backbone: b,
                inputs: &x,
                clamp_range: wide(21),
            })
            .collect();
        let fusions = vec![
            FusionSpec {
                name: "weighted".into(),
                strategy: FusionStrategy::Optimized,
                weights: FusionWeights::new(vec![0.2, 0.6, 0.2]).unwrap(),
            },
            FusionSpec {
                name: "majority".into(),
                strategy: FusionStrategy::Majority,
                weights: FusionWeights::equal(3),
            },
        ];
        let t = robustness_sweep(&members, &y, &fusions, &[0.0, 0.05], 0.5).unwrap();
        assert!(t.row("m1").unwrap().accuracy[1] < 0.5);
        assert!(t.row("majority").unwrap().accuracy[1] >= t.row("weighted").unwrap().accuracy[1]);
        assert!(t.row("majority").unwrap().accuracy[1] > 0.9);
    }
}
