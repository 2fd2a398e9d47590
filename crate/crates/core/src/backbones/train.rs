//! Mini-batch training, evaluation and input gradients.

use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{self, Graph, Tensor, Var};
use super::optim::Adam;
use super::{blocks, logits_to_proba, Backbone, Head};
use crate::error::{Error, Result};

/// Preprocessed inputs `[n, h, w, c]` with labels (0 real, 1 fake).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub inputs: Tensor,
    pub labels: Vec<u8>,
}

impl TensorSet {
    pub fn new(inputs: Tensor, labels: Vec<u8>) -> Result<Self> {
        if inputs.ndim() != 4 || inputs.shape()[0] != labels.len() {
            return Err(Error::invalid_input(format!(
                "inputs {:?} do not align with {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if labels.iter().any(|l| *l > 1) {
            return Err(Error::invalid_input("labels must be 0 or 1"));
        }
        Ok(TensorSet { inputs, labels })
    }

    /// Stacks per-sample `[h, w, c]` tensors.
    pub fn from_samples(samples: Vec<(ndarray::Array3<f64>, u8)>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid_input("no samples"));
        };
        let (h, w, c) = first.0.dim();
        let mut data = Vec::with_capacity(samples.len() * h * w * c);
        let mut labels = Vec::with_capacity(samples.len());
        for (x, y) in samples {
            if x.dim() != (h, w, c) {
                return Err(Error::invalid_input("samples have differing shapes"));
            }
            data.extend(x.iter());
            labels.push(y);
        }
        let inputs = ArrayD::from_shape_vec(IxDyn(&[labels.len(), h, w, c]), data).unwrap();
        TensorSet::new(inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> TensorSet {
        TensorSet {
            inputs: self.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Training loss selection.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Binary cross-entropy on the head's own arity.
    CrossEntropy,
    /// Hard-label distillation against teacher classes aligned with the
    /// training set. Only valid for two-logit heads.
    HardDistill { teacher_classes: &'a [usize] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochConfig {
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Records the loss of a labeled batch; `idx` maps batch rows to positions
/// in the teacher-class slice.
fn loss_node(
    g: &mut Graph,
    head: Head,
    logits: Var,
    labels: &[u8],
    objective: Objective<'_>,
    idx: &[usize],
) -> Result<Var> {
    match (head, objective) {
        (Head::Sigmoid, Objective::CrossEntropy) => {
            let t: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            Ok(g.bce_with_logits(logits, &t))
        }
        (Head::Softmax2, Objective::CrossEntropy) => {
            let t: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            Ok(g.softmax_ce(logits, &t))
        }
        (Head::Softmax2, Objective::HardDistill { teacher_classes }) => {
            let t: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            let teacher: Vec<usize> = idx.iter().map(|&i| teacher_classes[i]).collect();
            if teacher.iter().any(|c| *c > 1) {
                return Err(Error::invalid_input("teacher classes must be 0 or 1"));
            }
            Ok(blocks::hard_distill_graph(g, logits, &t, &teacher))
        }
        (Head::Sigmoid, Objective::HardDistill { .. }) => Err(Error::UnsupportedBackbone(
            "hard distillation needs a two-logit head".into(),
        )),
    }
}

fn count_correct(head: Head, logits: &Tensor, labels: &[u8]) -> usize {
    logits_to_proba(head, logits)
        .iter()
        .zip(labels)
        .filter(|(p, &y)| (**p >= 0.5) == (y == 1))
        .count()
}

/// Mean loss, parameter gradients and batch logits for one batch.
pub fn batch_gradients(
    model: &Backbone,
    inputs: Tensor,
    labels: &[u8],
    objective: Objective<'_>,
    idx: &[usize],
) -> Result<(f64, IndexMap<String, Tensor>, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(inputs, false);
    let fwd = model.forward(&mut g, x);
    let loss = loss_node(&mut g, model.head(), fwd.logits, labels, objective, idx)?;
    let mut grads = g.backward(loss);
    let value = g.value(loss).first().copied().unwrap_or(f64::NAN);
    let logits = g.value(fwd.logits).clone();
    Ok((value, g.param_grads(&mut grads), logits))
}

/// One full pass over `data` in a seeded shuffled order.
pub fn train_epoch(
    model: &mut Backbone,
    opt: &mut Adam,
    data: &TensorSet,
    cfg: &EpochConfig,
    objective: Objective<'_>,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::invalid_input("cannot train on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid_config("batch size must be positive"));
    }
    if let Objective::HardDistill { teacher_classes } = objective {
        if teacher_classes.len() != data.len() {
            return Err(Error::invalid_input("teacher classes do not align with the dataset"));
        }
    }
    model.check_batch(&data.inputs)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.shuffle_seed));

    let head = model.head();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for idx in order.chunks(cfg.batch_size) {
        let inputs = graph::batch_rows(&data.inputs, idx);
        let labels: Vec<u8> = idx.iter().map(|&i| data.labels[i]).collect();
        let (loss, grads, logits) = batch_gradients(model, inputs, &labels, objective, idx)?;
        if !loss.is_finite() {
            return Err(Error::invalid_input("training loss diverged"));
        }
        loss_sum += loss * idx.len() as f64;
        correct += count_correct(head, &logits, &labels);
        opt.step(&mut model.params, &grads);
    }
    Ok(EpochStats {
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Mean cross-entropy and accuracy at threshold 0.5, without updates.
pub fn evaluate(model: &Backbone, data: &TensorSet) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::invalid_input("cannot evaluate an empty dataset"));
    }
    let head = model.head();
    let logits = super::predict_logits(model, &data.inputs)?;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (z, &y) in logits.iter().zip(&data.labels) {
        let (loss, p) = match head {
            Head::Sigmoid => {
                let z = z[0];
                let loss = z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
                (loss, graph::sigmoid(z))
            }
            Head::Softmax2 => (graph::log_sum_exp(z) - z[y as usize], graph::sigmoid(z[1] - z[0])),
        };
        loss_sum += loss;
        if (p >= 0.5) == (y == 1) {
            correct += 1;
        }
    }
    Ok(EpochStats {
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Gradient of the summed per-sample cross-entropy with respect to the
/// inputs. Parameters are not modified.
pub fn input_gradient(model: &Backbone, inputs: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let n = model.check_batch(inputs)?;
    if n != labels.len() {
        return Err(Error::invalid_input("labels do not align with inputs"));
    }
    let mut g = Graph::new();
    let x = g.input(inputs.clone(), true);
    let fwd = model.forward(&mut g, x);
    let loss = loss_node(&mut g, model.head(), fwd.logits, labels, Objective::CrossEntropy, &[])?;
    let loss = g.scale(loss, n as f64);
    let mut grads = g.backward(loss);
    grads
        .take(x)
        .ok_or_else(|| Error::UnsupportedBackbone(format!("{} yields no input gradient", model.name)))
}

/// Per-sample cross-entropy losses.
pub fn sample_losses(model: &Backbone, inputs: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
    let logits = super::predict_logits(model, inputs)?;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| match model.head() {
            Head::Sigmoid => z[0].max(0.0) - z[0] * y as f64 + (-z[0].abs()).exp().ln_1p(),
            Head::Softmax2 => graph::log_sum_exp(z) - z[y as usize],
        })
        .collect())
}
