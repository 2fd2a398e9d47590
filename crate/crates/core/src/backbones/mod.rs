//! Differentiable building blocks and the desk-scale stand-in backbones.
//!
//! Every backbone maps a batch `[n, h, w, c]` of preprocessed inputs to a
//! penultimate embedding and either one logit (sigmoid head) or two logits
//! (softmax head). The probability reported by [`predict_proba`] is always
//! that of the fake class, label `1`.

pub mod blocks;
pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod train;

mod attention;
mod logistic;
mod seconv;
mod wavenext;

use ndarray::{Array2, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use graph::{Graph, Tensor, Var};
use params::{Init, ParamStore};

pub use attention::AttentionConfig;
pub use logistic::LogisticConfig;
pub use seconv::SeConvConfig;
pub use wavenext::WaveNextConfig;

/// Output arity of the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// One logit, sigmoid probability, binary cross-entropy.
    Sigmoid,
    /// Two logits, softmax probability, categorical cross-entropy.
    Softmax2,
}

/// Which image representation a backbone consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    Plain,
    Wavelet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub preprocess: Preprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Strided convolutions with swish and squeeze-excitation gates.
    SeConv(SeConvConfig),
    /// Patch-token transformer encoder.
    Attention(AttentionConfig),
    /// Depthwise 7×7 / channel LayerNorm / GELU residual blocks over wavelet
    /// feature images.
    WaveNext(WaveNextConfig),
    /// Linear model over the flattened input.
    Logistic(LogisticConfig),
}

impl Architecture {
    pub fn head(&self) -> Head {
        match self {
            Architecture::Attention(_) => Head::Softmax2,
            _ => Head::Sigmoid,
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        match self {
            Architecture::SeConv(c) => InputSpec {
                height: c.input_size,
                width: c.input_size,
                channels: 3,
                preprocess: Preprocess::Plain,
            },
            Architecture::Attention(c) => InputSpec {
                height: c.input_size,
                width: c.input_size,
                channels: 3,
                preprocess: Preprocess::Plain,
            },
            Architecture::WaveNext(c) => InputSpec {
                height: c.input_size,
                width: c.input_size,
                channels: 3,
                preprocess: Preprocess::Wavelet,
            },
            Architecture::Logistic(c) => InputSpec {
                height: c.height,
                width: c.width,
                channels: c.channels,
                preprocess: Preprocess::Plain,
            },
        }
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = SpecBuilder::default();
        match self {
            Architecture::SeConv(c) => seconv::declare(c, &mut specs),
            Architecture::Attention(c) => attention::declare(c, &mut specs),
            Architecture::WaveNext(c) => wavenext::declare(c, &mut specs),
            Architecture::Logistic(c) => logistic::declare(c, &mut specs),
        }
        specs.0
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::SeConv(c) => c.validate(),
            Architecture::Attention(c) => c.validate(),
            Architecture::WaveNext(c) => c.validate(),
            Architecture::Logistic(c) => c.validate(),
        }
    }
}

type ParamSpec = (String, Vec<usize>, Init);

#[derive(Default)]
pub(crate) struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push((name, shape, init));
    }

    pub(crate) fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.push(format!("{name}.w"), vec![k, k, cin, cout], Init::FanIn(k * k * cin));
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    pub(crate) fn depthwise(&mut self, name: &str, k: usize, c: usize) {
        self.push(format!("{name}.w"), vec![k, k, c], Init::FanIn(k * k));
        self.push(format!("{name}.b"), vec![c], Init::Zeros);
    }

    pub(crate) fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.w"), vec![fan_in, fan_out], Init::FanIn(fan_in));
        self.push(format!("{name}.b"), vec![fan_out], Init::Zeros);
    }

    pub(crate) fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], Init::Ones);
        self.push(format!("{name}.b"), vec![c], Init::Zeros);
    }

    pub(crate) fn tensor(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.push(name.to_string(), shape, init);
    }
}

/// Binds stored parameters into a graph under construction.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub(crate) fn p(&mut self, name: &str) -> Var {
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not declared"))
            .clone();
        self.g.param(name, t)
    }

    pub(crate) fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.conv2d(x, w, b, stride, pad)
    }

    pub(crate) fn depthwise(&mut self, name: &str, x: Var, pad: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.depthwise_conv2d(x, w, b, pad)
    }

    pub(crate) fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.linear(x, w, b)
    }

    pub(crate) fn norm(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.p(&format!("{name}.g"));
        let beta = self.p(&format!("{name}.b"));
        self.g.layer_norm_last(x, gamma, beta, 1e-6)
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub embedding: Var,
    pub logits: Var,
}

/// A named architecture with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub name: String,
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Backbone {
    pub fn new(name: impl Into<String>, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = ParamStore::initialize(&arch.param_specs(), seed);
        Ok(Backbone {
            name: name.into(),
            arch,
            params,
        })
    }

    pub fn head(&self) -> Head {
        self.arch.head()
    }

    pub fn input_spec(&self) -> InputSpec {
        self.arch.input_spec()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_params(&mut self, params: &ParamStore) -> Result<()> {
        self.params.assign(params)
    }

    /// Zeroes the classification head so every prediction starts at 0.5.
    pub fn zero_head(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("head.") {
                t.fill(0.0);
            }
        }
    }

    pub fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let spec = self.input_spec();
        let want = [spec.height, spec.width, spec.channels];
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::invalid_input(format!(
                "{} expects [n, {}, {}, {}] inputs, got {:?}",
                self.name, spec.height, spec.width, spec.channels, shape
            )));
        }
        Ok(shape[0])
    }

    /// Records the forward pass of `x` into `g`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> ForwardOutput {
        let mut ctx = Ctx {
            g,
            params: &self.params,
        };
        match &self.arch {
            Architecture::SeConv(c) => seconv::forward(c, &mut ctx, x),
            Architecture::Attention(c) => attention::forward(c, &mut ctx, x),
            Architecture::WaveNext(c) => wavenext::forward(c, &mut ctx, x),
            Architecture::Logistic(c) => logistic::forward(c, &mut ctx, x),
        }
    }
}

/// Logits to fake-class probabilities.
pub fn logits_to_proba(head: Head, logits: &Tensor) -> Vec<f64> {
    match head {
        Head::Sigmoid => logits.iter().map(|z| graph::sigmoid(*z)).collect(),
        Head::Softmax2 => {
            let z = logits.view().into_dimensionality::<Ix2>().expect("softmax head logits");
            z.outer_iter().map(|row| graph::sigmoid(row[1] - row[0])).collect()
        }
    }
}

const INFERENCE_CHUNK: usize = 64;

fn run_inference<T>(
    backbone: &Backbone,
    batch: &Tensor,
    mut f: impl FnMut(&Graph, ForwardOutput) -> Vec<T>,
) -> Result<Vec<T>> {
    let n = backbone.check_batch(batch)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        let mut g = Graph::new();
        let x = g.input(graph::batch_range(batch, start, end), false);
        let fwd = backbone.forward(&mut g, x);
        out.extend(f(&g, fwd));
        start = end;
    }
    Ok(out)
}

/// Fake-class probability per sample, in input order.
pub fn predict_proba(backbone: &Backbone, batch: &Tensor) -> Result<Vec<f64>> {
    let head = backbone.head();
    run_inference(backbone, batch, |g, fwd| logits_to_proba(head, g.value(fwd.logits)))
}

/// Raw logits per sample (one or two per row).
pub fn predict_logits(backbone: &Backbone, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    run_inference(backbone, batch, |g, fwd| {
        let z = g.value(fwd.logits);
        let n = z.shape()[0];
        z.as_standard_layout()
            .into_owned()
            .into_shape((n, z.len() / n))
            .unwrap()
            .outer_iter()
            .map(|r| r.to_vec())
            .collect()
    })
}

/// Penultimate-layer embeddings, one row per sample.
pub fn embed(backbone: &Backbone, batch: &Tensor) -> Result<Array2<f64>> {
    let rows = run_inference(backbone, batch, |g, fwd| {
        let e = g.value(fwd.embedding);
        e.axis_iter(Axis(0)).map(|r| r.iter().copied().collect::<Vec<f64>>()).collect()
    })?;
    let d = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((flat.len() / d.max(1), d), flat).expect("ragged embeddings"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_archs() -> Vec<Architecture> {
        vec![
            Architecture::SeConv(SeConvConfig::default()),
            Architecture::Attention(AttentionConfig::default()),
            Architecture::WaveNext(WaveNextConfig::default()),
            Architecture::Logistic(LogisticConfig {
                height: 4,
                width: 4,
                channels: 3,
            }),
        ]
    }

    fn random_batch(spec: InputSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[n, spec.height, spec.width, spec.channels]), |_| {
            rng.gen_range(-2.0..2.0)
        })
    }

    #[test]
    fn desk_scale_parameter_counts() {
        for arch in all_archs().into_iter().take(3) {
            let b = Backbone::new("b", arch, 0).unwrap();
            let n = b.params().scalar_count();
            assert!((50_000..=500_000).contains(&n), "{:?}: {n} parameters", b.arch);
        }
    }

    #[test]
    fn zero_head_predicts_one_half() {
        for arch in all_archs() {
            let mut b = Backbone::new("b", arch, 1).unwrap();
            b.zero_head();
            let batch = random_batch(b.input_spec(), 3, 2);
            let p = predict_proba(&b, &batch).unwrap();
            assert_eq!(p, vec![0.5; 3]);
        }
    }

    #[test]
    fn predictions_are_order_preserving_and_deterministic() {
        for arch in all_archs() {
            let b = Backbone::new("b", arch, 3).unwrap();
            let batch = random_batch(b.input_spec(), 5, 4);
            let all = predict_proba(&b, &batch).unwrap();
            assert_eq!(all.len(), 5);
            assert!(all.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(all, predict_proba(&b, &batch).unwrap());
            for i in 0..5 {
                let single = predict_proba(&b, &graph::batch_range(&batch, i, i + 1)).unwrap();
                assert!((single[0] - all[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let b = Backbone::new("b", Architecture::SeConv(SeConvConfig::default()), 0).unwrap();
        let bad = ArrayD::zeros(IxDyn(&[2, 8, 8, 3]));
        assert!(matches!(predict_proba(&b, &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn parameter_round_trip_is_bit_exact() {
        let a = Backbone::new("a", Architecture::WaveNext(WaveNextConfig::default()), 5).unwrap();
        let mut b = Backbone::new("b", Architecture::WaveNext(WaveNextConfig::default()), 6).unwrap();
        assert_ne!(a.params().content_hash(), b.params().content_hash());
        b.set_params(a.params()).unwrap();
        assert_eq!(a.params().content_hash(), b.params().content_hash());
        let back = ParamStore::from_bytes(&a.params().to_bytes()).unwrap();
        assert_eq!(&back, a.params());
    }

    #[test]
    fn softmax_head_probability_matches_softmax() {
        let logits = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.3, 1.1, 2.0, -1.0]).unwrap();
        let p = logits_to_proba(Head::Softmax2, &logits);
        let direct = |a: f64, b: f64| b.exp() / (a.exp() + b.exp());
        assert!((p[0] - direct(0.3, 1.1)).abs() < 1e-12);
        assert!((p[1] - direct(2.0, -1.0)).abs() < 1e-12);
    }
}
