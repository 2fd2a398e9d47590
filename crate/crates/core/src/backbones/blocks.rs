//! Building blocks shared by the backbones, in two forms: plain array
//! functions for direct evaluation, and graph builders used inside the
//! differentiable forward passes.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis};

use super::graph::{self, Graph, Var};
use crate::error::{Error, Result};

/// Global average pool of an `H × W × C` feature map.
pub fn squeeze(featmap: ArrayView3<'_, f64>) -> Result<Array1<f64>> {
    let (h, w, _) = featmap.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid_input("squeeze needs a non-empty spatial extent"));
    }
    Ok(featmap.sum_axis(Axis(0)).sum_axis(Axis(0)) / (h * w) as f64)
}

/// Bottleneck gate network parameters: `C → C/r → C`.
#[derive(Debug, Clone)]
pub struct ExciteWeights {
    /// `[C, C/r]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[C/r, C]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ExciteWeights {
    pub fn zeros(channels: usize, reduced: usize) -> Self {
        ExciteWeights {
            w1: Array2::zeros((channels, reduced)),
            b1: Array1::zeros(reduced),
            w2: Array2::zeros((reduced, channels)),
            b2: Array1::zeros(channels),
        }
    }
}

/// Channel gates `sigmoid(W2 · relu(W1 · z))`.
pub fn excite(z: ArrayView1<'_, f64>, weights: &ExciteWeights) -> Result<Array1<f64>> {
    let c = z.len();
    let r = weights.w1.ncols();
    if weights.w1.nrows() != c || weights.b1.len() != r || weights.w2.dim() != (r, c) || weights.b2.len() != c {
        return Err(Error::invalid_input(format!(
            "excite weights do not match {c} channels"
        )));
    }
    let hidden = (z.dot(&weights.w1) + &weights.b1).mapv(|v| v.max(0.0));
    Ok((hidden.dot(&weights.w2) + &weights.b2).mapv(graph::sigmoid))
}

pub fn swish(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v * graph::sigmoid(v))
}

/// Exact `x · Φ(x)`.
pub fn gelu(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(graph::gelu)
}

/// Layer normalization across the channels of one spatial site.
pub fn layer_norm_channels(
    x: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    eps: f64,
) -> Result<Array1<f64>> {
    let c = x.len();
    if c == 0 || gamma.len() != c || beta.len() != c {
        return Err(Error::invalid_input("layer norm shapes do not match"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid_config("layer norm eps must be positive"));
    }
    let mean = x.sum() / c as f64;
    let var = x.mapv(|v| (v - mean) * (v - mean)).sum() / c as f64;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x.mapv(|v| (v - mean) * inv) * gamma + beta)
}

/// Attention output together with its row-stochastic weight matrix.
#[derive(Debug, Clone)]
pub struct Attention {
    pub output: Array2<f64>,
    pub weights: Array2<f64>,
}

/// `softmax(Q Kᵀ / √d) V` for `Q: [n, d_k]`, `K: [m, d_k]`, `V: [m, d_v]`.
pub fn scaled_dot_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    head_dim: f64,
) -> Result<Attention> {
    if !(head_dim > 0.0) {
        return Err(Error::invalid_config("attention head dimension must be positive"));
    }
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || k.nrows() == 0 {
        return Err(Error::invalid_input("attention operand shapes are inconsistent"));
    }
    let mut weights = q.dot(&k.t()) / head_dim.sqrt();
    for mut row in weights.outer_iter_mut() {
        graph::softmax_in_place(row.as_slice_mut().unwrap());
    }
    Ok(Attention {
        output: weights.dot(&v),
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub has_gradient: bool,
}

fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    graph::log_sum_exp(logits) - logits[class]
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// `½ CE(student, label) + ½ CE(student, argmax teacher)`.
pub fn hard_distill_loss(student: &[f64], teacher: &[f64], label: usize) -> Result<LossValue> {
    if student.len() != teacher.len() || student.len() < 2 {
        return Err(Error::invalid_input("student and teacher logits must share a class count >= 2"));
    }
    if label >= student.len() {
        return Err(Error::invalid_input(format!(
            "label {label} out of range for {} classes",
            student.len()
        )));
    }
    let teacher_class = argmax(teacher);
    let value = 0.5 * cross_entropy(student, label) + 0.5 * cross_entropy(student, teacher_class);
    Ok(LossValue {
        value,
        has_gradient: true,
    })
}

/// Graph form of [`excite`]; `z` is `[n, C]`.
pub fn excite_graph(g: &mut Graph, z: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = g.linear(z, w1, b1);
    let h = g.relu(h);
    let s = g.linear(h, w2, b2);
    g.sigmoid(s)
}

/// Graph form of [`scaled_dot_attention`] over a batch: `q, k, v` are
/// `[b, t, d]`.
pub fn attention_graph(g: &mut Graph, q: Var, k: Var, v: Var, head_dim: usize) -> Var {
    let kt = g.transpose_last2(k);
    let scores = g.batch_matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = g.softmax_last(scores);
    g.batch_matmul(weights, v)
}

/// Graph form of [`hard_distill_loss`] averaged over a batch of `[n, k]`
/// logits.
pub fn hard_distill_graph(g: &mut Graph, logits: Var, labels: &[usize], teacher_classes: &[usize]) -> Var {
    let a = g.softmax_ce(logits, labels);
    let b = g.softmax_ce(logits, teacher_classes);
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::graph::gradcheck::max_rel_error;
    use crate::backbones::graph::Tensor;
    use ndarray::{array, Array3, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn squeeze_cases() {
        let c = Array3::from_elem((3, 4, 2), 0.75);
        assert!(squeeze(c.view()).unwrap().iter().all(|v| (v - 0.75).abs() < 1e-15));
        let x = Array3::from_shape_vec((2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(squeeze(x.view()).unwrap()[0], 2.5);
        assert!(squeeze(Array3::<f64>::zeros((0, 3, 2)).view()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((7, 7, 16), |_| rng.gen_range(-1.0..1.0));
        let z = squeeze(x.view()).unwrap();
        for c in 0..16 {
            let mut sum = 0.0;
            for i in 0..7 {
                for j in 0..7 {
                    sum += x[[i, j, c]];
                }
            }
            assert!((z[c] - sum / 49.0).abs() < 1e-7);
        }
    }

    #[test]
    fn excite_cases() {
        let z = array![0.3, -1.0, 2.0, 0.5];
        let gates = excite(z.view(), &ExciteWeights::zeros(4, 2)).unwrap();
        assert!(gates.iter().all(|g| *g == 0.5));

        let mut w = ExciteWeights::zeros(4, 4);
        w.w1 = Array2::eye(4);
        for z in [array![5.0, -2.0, 0.1, 9.0], array![-1.0, -1.0, 3.0, 0.0]] {
            assert!(excite(z.view(), &w).unwrap().iter().all(|g| *g == 0.5));
        }
        assert!(matches!(
            excite(array![1.0, 2.0, 3.0].view(), &ExciteWeights::zeros(4, 2)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn excite_graph_matches_and_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_t(&mut rng, &[1, 8]),
            rand_t(&mut rng, &[8, 2]),
            rand_t(&mut rng, &[2]),
            rand_t(&mut rng, &[2, 8]),
            rand_t(&mut rng, &[8]),
        ];
        let weights = ExciteWeights {
            w1: inputs[1].clone().into_dimensionality().unwrap(),
            b1: inputs[2].clone().into_dimensionality().unwrap(),
            w2: inputs[3].clone().into_dimensionality().unwrap(),
            b2: inputs[4].clone().into_dimensionality().unwrap(),
        };
        let z = inputs[0].clone().into_shape(8).unwrap();
        let direct = excite(z.view(), &weights).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = excite_graph(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4]);
        for (a, b) in g.value(out).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let err = max_rel_error(&inputs, 1e-5, |g, v| excite_graph(g, v[0], v[1], v[2], v[3], v[4]));
        assert!(err < 1e-4, "excite rel err {err}");
    }

    #[test]
    fn swish_values() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, 20.0, 1.0]).unwrap();
        let y = swish(&x);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 20.0).abs() < 1e-6);
        assert!((y[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((y[2] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn gelu_values() {
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841_344_746).abs() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: f64 = rng.gen_range(-6.0..6.0);
            assert!((graph::gelu(v) - graph::gelu(-v) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Array1::ones(3);
        let zeros = Array1::zeros(3);
        let out = layer_norm_channels(array![2.0, 2.0, 2.0].view(), ones.view(), zeros.view(), 1e-5).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        let out = layer_norm_channels(
            array![1.0, 3.0].view(),
            Array1::ones(2).view(),
            Array1::zeros(2).view(),
            1e-12,
        )
        .unwrap();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_graph_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_t(&mut rng, &[1, 16]), rand_t(&mut rng, &[16]), rand_t(&mut rng, &[16])];
        let direct = layer_norm_channels(
            inputs[0].view().into_shape(16).unwrap(),
            inputs[1].view().into_dimensionality().unwrap(),
            inputs[2].view().into_dimensionality().unwrap(),
            1e-6,
        )
        .unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let y = g.layer_norm_last(vars[0], vars[1], vars[2], 1e-6);
        for (a, b) in g.value(y).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = rand_t(&mut rng, &[1, 16]);
        let err = max_rel_error(&inputs, 1e-5, |g, v| {
            let y = g.layer_norm_last(v[0], v[1], v[2], 1e-6);
            let wv = g.input(w.clone(), false);
            g.mul(y, wv)
        });
        assert!(err < 1e-4, "layer norm rel err {err}");
    }

    #[test]
    fn attention_cases() {
        let q = array![[0.2, -0.4]];
        let k = array![[0.2, -0.4]];
        let v = array![[3.0, 7.0]];
        let a = scaled_dot_attention(q.view(), k.view(), v.view(), 2.0).unwrap();
        assert_eq!(a.output, v);

        let k = array![[1.0, 0.0], [1.0, 5.0]];
        let q = array![[2.0, 0.0]];
        let v = array![[1.0, 2.0], [3.0, 6.0]];
        let a = scaled_dot_attention(q.view(), k.view(), v.view(), 2.0).unwrap();
        assert!((a.output[[0, 0]] - 2.0).abs() < 1e-12 && (a.output[[0, 1]] - 4.0).abs() < 1e-12);

        let a = scaled_dot_attention(
            array![[1.0, 0.0]].view(),
            array![[1.0, 0.0], [0.0, 1.0]].view(),
            array![[1.0], [0.0]].view(),
            1.0,
        )
        .unwrap();
        let e = std::f64::consts::E;
        assert!((a.weights[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.output[[0, 0]] - 0.7311).abs() < 1e-4);

        assert!(matches!(
            scaled_dot_attention(q.view(), k.view(), v.view(), 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn attention_rows_sum_to_one_and_graph_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-2.0..2.0));
        let k = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0..2.0));
        let v = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-2.0..2.0));
        let a = scaled_dot_attention(q.view(), k.view(), v.view(), 4.0).unwrap();
        for row in a.weights.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let mut g = Graph::new();
        let qv = g.input(q.clone().into_shape((1, 5, 4)).unwrap().into_dyn(), false);
        let kv = g.input(k.clone().into_shape((1, 6, 4)).unwrap().into_dyn(), false);
        let vv = g.input(v.clone().into_shape((1, 6, 3)).unwrap().into_dyn(), false);
        let out = attention_graph(&mut g, qv, kv, vv, 4);
        for (x, y) in g.value(out).iter().zip(a.output.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_cases() {
        let ce = |z: &[f64], y: usize| graph::log_sum_exp(z) - z[y];
        let z = [0.4, -1.2];
        let l = hard_distill_loss(&z, &[3.0, 1.0], 0).unwrap();
        assert_eq!(l.value, ce(&z, 0));

        for teacher in [[5.0, -5.0], [-1.0, 2.0]] {
            let l = hard_distill_loss(&[0.3, 0.3], &teacher, 1).unwrap();
            assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        }

        let l = hard_distill_loss(&[2.0, 0.0], &[0.0, 1.0], 0).unwrap();
        let s2 = graph::sigmoid(2.0);
        let want = 0.5 * (-s2.ln()) + 0.5 * (-(1.0 - s2).ln());
        assert!((l.value - want).abs() < 1e-12);
        assert!((l.value - 1.1269).abs() < 1e-4);

        assert!(hard_distill_loss(&[0.0, 0.0], &[0.0, 0.0], 2).is_err());
    }
}
