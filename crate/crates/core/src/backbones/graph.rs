//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass on a tape; a call
//! to [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients. Graphs are built per batch and dropped afterwards.
//!
//! Spatial tensors are channel-last: `[batch, height, width, channels]`.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Gelu(Var),
    SoftmaxLast(Var),
    LayerNormLast {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MeanAxis(Var, usize),
    ChannelScale(Var, Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a named trainable tensor.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let c = *self.value(x).shape().last().expect("add_bias on a scalar");
        assert_eq!(self.value(b).shape(), &[c], "add_bias: bias length");
        let value = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        self.push(value, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `[b, n, k] × [b, k, m] → [b, n, m]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (bs, n, k) = dims3(va);
        let (bs2, k2, m) = dims3(vb);
        assert!(bs == bs2 && k == k2, "batch_matmul: shape mismatch");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, n, m]));
        for i in 0..bs {
            let pa = va.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let pb = vb.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&pa.dot(&pb).into_dyn());
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::BatchMatMul(a, b), rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let nd = v.ndim();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        let value = v.view().permuted_axes(axes).as_standard_layout().into_owned();
        let rg = self.rg(x);
        self.push(value, Op::TransposeLast2(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Applies `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let k = *shape.last().unwrap();
        let m = self.value(w).shape()[1];
        let rows = shape.iter().product::<usize>() / k;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, k]) };
        let y = self.matmul(flat, w);
        let y = self.add_bias(y, b);
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = m;
            self.reshape(y, &out_shape)
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Swish(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut value = self.value(x).as_standard_layout().into_owned();
        let c = *value.shape().last().unwrap();
        for row in value.as_slice_mut().unwrap().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxLast(x), rg)
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x).as_standard_layout().into_owned();
        let c = *xv.shape().last().unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert!(g.len() == c && b.len() == c, "layer_norm: affine length");
        let g = g.as_slice().unwrap().to_vec();
        let b = b.as_slice().unwrap().to_vec();
        let mut xhat = xv.clone();
        let mut out = xv;
        let groups = out.len() / c;
        let mut inv_std = Vec::with_capacity(groups);
        for (row, hrow) in out
            .as_slice_mut()
            .unwrap()
            .chunks_mut(c)
            .zip(xhat.as_slice_mut().unwrap().chunks_mut(c))
        {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..c {
                let h = (row[i] - mean) * is;
                hrow[i] = h;
                row[i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNormLast {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// 2-D convolution; `w` is `[k, k, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, h, wd, cin) = dims4(xv);
        let (k, k2, wcin, cout) = dims4(wv);
        assert!(k == k2 && wcin == cin, "conv2d: kernel shape");
        let geom = ConvGeom {
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = conv_out(h, wd, geom);
        let cols = im2col(xv, geom, oh, ow);
        let wmat = wv.view().into_shape((k * k * cin, cout)).unwrap();
        let mut out = cols.dot(&wmat);
        out += &self.value(b).view().into_shape(cout).unwrap();
        let out = out.into_shape(IxDyn(&[n, oh, ow, cout])).unwrap();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Stride-1 depthwise convolution with `pad` zero padding; `w` is
    /// `[k, k, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = self.value(x).as_standard_layout();
        let wv = self.value(w).as_standard_layout();
        let (n, h, wd, c) = dims4(&xv);
        let (k, _, wc) = dims3(&wv);
        assert_eq!(wc, c, "depthwise: channel mismatch");
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let bias = self.value(b).as_slice().unwrap().to_vec();
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let mut out = vec![0.0; n * oh * ow * c];
        for bi in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((bi * oh + oy) * ow + ox) * c;
                    let orow = &mut out[o..o + c];
                    orow.copy_from_slice(&bias);
                    for ky in 0..k {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox + kx;
                            if ix < pad || ix >= wd + pad {
                                continue;
                            }
                            let xi = ((bi * h + iy - pad) * wd + ix - pad) * c;
                            let wi = (ky * k + kx) * c;
                            for ((o, xv), wv) in orow.iter_mut().zip(&xs[xi..xi + c]).zip(&ws[wi..wi + c]) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, oh, ow, c]), out).unwrap();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::DepthwiseConv2d { x, w, b, pad }, rg)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).mean_axis(Axis(axis)).expect("mean over empty axis");
        let rg = self.rg(x);
        self.push(value, Op::MeanAxis(x, axis), rg)
    }

    /// Global average pool: `[n, h, w, c] → [n, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (n, h, w, c) = dims4(self.value(x));
        let flat = self.reshape(x, &[n, h * w, c]);
        self.mean_axis(flat, 1)
    }

    /// Multiplies `x[n, ..., c]` by per-sample channel gates `g[n, c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Var {
        let xv = self.value(x).as_standard_layout().into_owned();
        let gv = self.value(g).as_standard_layout();
        let n = xv.shape()[0];
        let c = *xv.shape().last().unwrap();
        assert_eq!(gv.shape(), &[n, c], "channel_scale: gate shape");
        let per = xv.len() / n;
        let gs = gv.as_slice().unwrap();
        let mut out = xv;
        for (bi, chunk) in out.as_slice_mut().unwrap().chunks_mut(per).enumerate() {
            let gate = &gs[bi * c..(bi + 1) * c];
            for site in chunk.chunks_mut(c) {
                for (v, g) in site.iter_mut().zip(gate) {
                    *v *= g;
                }
            }
        }
        let rg = self.rg(x) || self.rg(g);
        self.push(out, Op::ChannelScale(x, g), rg)
    }

    /// Mean binary cross-entropy of single-logit outputs `[n, 1]` or `[n]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "bce: target count");
        let n = targets.len() as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| bce_logit(z, t))
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = as2(self.value(logits));
        assert_eq!(z.nrows(), targets.len(), "softmax_ce: target count");
        let loss = z
            .outer_iter()
            .zip(targets)
            .map(|(row, &t)| {
                let lse = log_sum_exp(row.as_slice().unwrap());
                lse - row[t]
            })
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Back-propagates from a scalar (or any tensor, seeded with ones).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, g: Tensor| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy);
                }
                Op::Mul(a, b) => {
                    acc(*a, &gy * self.value(*b));
                    acc(*b, &gy * self.value(*a));
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let c = self.value(*b).len();
                        let g2 = gy.view().into_shape((gy.len() / c, c)).unwrap();
                        acc(*b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                    acc(*x, gy);
                }
                Op::Scale(x, k) => acc(*x, gy * *k),
                Op::MatMul(a, b) => {
                    let g2 = as2(&gy);
                    if self.rg(*a) {
                        acc(*a, g2.dot(&as2(self.value(*b)).t()).into_dyn());
                    }
                    if self.rg(*b) {
                        acc(*b, as2(self.value(*a)).t().dot(&g2).into_dyn());
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let bs = va.shape()[0];
                    let mut ga = ArrayD::<f64>::zeros(va.raw_dim());
                    let mut gb = ArrayD::<f64>::zeros(vb.raw_dim());
                    for i in 0..bs {
                        let g = gy.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        let pa = va.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        let pb = vb.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        ga.index_axis_mut(Axis(0), i).assign(&g.dot(&pb.t()).into_dyn());
                        gb.index_axis_mut(Axis(0), i).assign(&pa.t().dot(&g).into_dyn());
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::TransposeLast2(x) => {
                    let nd = gy.ndim();
                    let mut axes: Vec<usize> = (0..nd).collect();
                    axes.swap(nd - 2, nd - 1);
                    acc(*x, gy.permuted_axes(axes).as_standard_layout().into_owned());
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).raw_dim();
                    acc(*x, gy.as_standard_layout().into_owned().into_shape(shape).unwrap());
                }
                Op::Relu(x) => {
                    let mut g = gy;
                    g.zip_mut_with(self.value(*x), |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(*x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = gy;
                    g.zip_mut_with(&node.value, |g, &s| *g *= s * (1.0 - s));
                    acc(*x, g);
                }
                Op::Swish(x) => {
                    let mut g = gy;
                    g.zip_mut_with(self.value(*x), |g, &v| *g *= swish_grad(v));
                    acc(*x, g);
                }
                Op::Gelu(x) => {
                    let mut g = gy;
                    g.zip_mut_with(self.value(*x), |g, &v| *g *= gelu_grad(v));
                    acc(*x, g);
                }
                Op::SoftmaxLast(x) => {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap();
                    let mut g = gy.as_standard_layout().into_owned();
                    for (grow, yrow) in g
                        .as_slice_mut()
                        .unwrap()
                        .chunks_mut(c)
                        .zip(y.as_slice().unwrap().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gi, yi) in grow.iter_mut().zip(yrow) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    acc(*x, g);
                }
                Op::LayerNormLast {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = *xhat.shape().last().unwrap();
                    let gy = gy.as_standard_layout().into_owned();
                    let gs = gy.as_slice().unwrap();
                    let hs = xhat.as_slice().unwrap();
                    let gamma_v = self.value(*gamma).as_slice().unwrap().to_vec();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; gs.len()];
                    for (row, ((grow, hrow), is)) in gs.chunks(c).zip(hs.chunks(c)).zip(inv_std).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for i in 0..c {
                            dgamma[i] += grow[i] * hrow[i];
                            dbeta[i] += grow[i];
                            let d = grow[i] * gamma_v[i];
                            sum_d += d;
                            sum_dh += d * hrow[i];
                        }
                        let out = &mut dx[row * c..(row + 1) * c];
                        let cf = c as f64;
                        for i in 0..c {
                            let d = grow[i] * gamma_v[i];
                            out[i] = is / cf * (cf * d - sum_d - hrow[i] * sum_dh);
                        }
                    }
                    acc(*gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                    acc(*beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
                    acc(*x, ArrayD::from_shape_vec(xhat.raw_dim(), dx).unwrap());
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let wv = self.value(*w);
                    let (k, _, cin, cout) = dims4(wv);
                    let g2 = gy
                        .as_standard_layout()
                        .into_owned()
                        .into_shape((cols.nrows(), cout))
                        .unwrap();
                    if self.rg(*b) {
                        acc(*b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.rg(*w) {
                        let gw = cols.t().dot(&g2);
                        acc(*w, gw.into_shape(IxDyn(&[k, k, cin, cout])).unwrap());
                    }
                    if self.rg(*x) {
                        let wmat = wv.view().into_shape((k * k * cin, cout)).unwrap();
                        let gcols = g2.dot(&wmat.t());
                        let xshape = self.value(*x).shape().to_vec();
                        acc(*x, col2im(&gcols, &xshape, *geom));
                    }
                }
                Op::DepthwiseConv2d { x, w, b, pad } => {
                    let xv = self.value(*x).as_standard_layout();
                    let wv = self.value(*w).as_standard_layout();
                    let (n, h, wd, c) = dims4(&xv);
                    let k = wv.shape()[0];
                    let pad = *pad;
                    let (_, oh, ow, _) = dims4(&gy);
                    let gy = gy.as_standard_layout();
                    let gs = gy.as_slice().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let ws = wv.as_slice().unwrap();
                    let mut dx = vec![0.0; xs.len()];
                    let mut dw = vec![0.0; ws.len()];
                    let mut db = vec![0.0; c];
                    for bi in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o = ((bi * oh + oy) * ow + ox) * c;
                                let grow = &gs[o..o + c];
                                for (d, g) in db.iter_mut().zip(grow) {
                                    *d += g;
                                }
                                for ky in 0..k {
                                    let iy = oy + ky;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = ox + kx;
                                        if ix < pad || ix >= wd + pad {
                                            continue;
                                        }
                                        let xi = ((bi * h + iy - pad) * wd + ix - pad) * c;
                                        let wi = (ky * k + kx) * c;
                                        for ch in 0..c {
                                            let g = grow[ch];
                                            dx[xi + ch] += g * ws[wi + ch];
                                            dw[wi + ch] += g * xs[xi + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let xdim = xv.raw_dim();
                    let wdim = wv.raw_dim();
                    acc(*x, ArrayD::from_shape_vec(xdim, dx).unwrap());
                    acc(*w, ArrayD::from_shape_vec(wdim, dw).unwrap());
                    acc(*b, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                }
                Op::MeanAxis(x, axis) => {
                    let xv = self.value(*x);
                    let len = xv.shape()[*axis] as f64;
                    let g = gy.insert_axis(Axis(*axis));
                    let g = g.broadcast(xv.raw_dim()).unwrap().mapv(|v| v / len);
                    acc(*x, g);
                }
                Op::ChannelScale(x, g) => {
                    let xv = self.value(*x).as_standard_layout();
                    let gv = self.value(*g).as_standard_layout();
                    let n = xv.shape()[0];
                    let c = *xv.shape().last().unwrap();
                    let per = xv.len() / n;
                    let gy = gy.as_standard_layout();
                    let ys = gy.as_slice().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let gates = gv.as_slice().unwrap();
                    let mut dx = vec![0.0; xs.len()];
                    let mut dg = vec![0.0; n * c];
                    for bi in 0..n {
                        let gate = &gates[bi * c..(bi + 1) * c];
                        let base = bi * per;
                        for site in 0..per / c {
                            let o = base + site * c;
                            for ch in 0..c {
                                dx[o + ch] = ys[o + ch] * gate[ch];
                                dg[bi * c + ch] += ys[o + ch] * xs[o + ch];
                            }
                        }
                    }
                    let xdim = xv.raw_dim();
                    acc(*x, ArrayD::from_shape_vec(xdim, dx).unwrap());
                    acc(*g, ArrayD::from_shape_vec(IxDyn(&[n, c]), dg).unwrap());
                }
                Op::BceWithLogits { logits, targets } => {
                    let scale = gy.first().copied().unwrap_or(1.0) / targets.len() as f64;
                    let z = self.value(*logits);
                    let mut g = z.mapv(sigmoid);
                    for (gi, t) in g.iter_mut().zip(targets) {
                        *gi = (*gi - t) * scale;
                    }
                    acc(*logits, g);
                }
                Op::SoftmaxCe { logits, targets } => {
                    let scale = gy.first().copied().unwrap_or(1.0) / targets.len() as f64;
                    let mut g = self.value(*logits).as_standard_layout().into_owned();
                    let k = g.shape()[1];
                    for (row, &t) in g.as_slice_mut().unwrap().chunks_mut(k).zip(targets) {
                        softmax_in_place(row);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    acc(*logits, g);
                }
            }
        }
        Gradients { grads }
    }

    /// Collects gradients of every registered parameter by name.
    pub fn param_grads(&self, grads: &mut Gradients) -> IndexMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn gelu(x: f64) -> f64 {
    x * phi(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi(x) + x * pdf
}

// Numerically stable `max(z, 0) - z t + ln(1 + e^{-|z|})`.
fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a matrix")
}

fn dims3<S: ndarray::Data<Elem = f64>>(t: &ndarray::ArrayBase<S, IxDyn>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn dims4<S: ndarray::Data<Elem = f64>>(t: &ndarray::ArrayBase<S, IxDyn>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub fn conv_out(h: usize, w: usize, g: ConvGeom) -> (usize, usize) {
    assert!(h + 2 * g.pad >= g.kernel && w + 2 * g.pad >= g.kernel, "conv: kernel larger than input");
    (
        (h + 2 * g.pad - g.kernel) / g.stride + 1,
        (w + 2 * g.pad - g.kernel) / g.stride + 1,
    )
}

// Rows are output sites `(n, oy, ox)`; columns are `(ky, kx, c)`.
fn im2col(x: &Tensor, g: ConvGeom, oh: usize, ow: usize) -> Array2<f64> {
    let x = x.as_standard_layout();
    let (n, h, w, c) = dims4(&x);
    let k = g.kernel;
    let xs = x.as_slice().unwrap();
    let width = k * k * c;
    let mut cols = vec![0.0; n * oh * ow * width];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * width;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * oh * ow, width), cols).unwrap()
}

fn col2im(gcols: &Array2<f64>, xshape: &[usize], g: ConvGeom) -> Tensor {
    let (n, h, w, c) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (oh, ow) = conv_out(h, w, g);
    let k = g.kernel;
    let width = k * k * c;
    let gs = gcols.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let mut dx = vec![0.0; n * h * w * c];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * width;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for (d, s) in dx[dst..dst + c].iter_mut().zip(&gs[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(xshape), dx).unwrap()
}

/// Slices the first axis of a batch tensor.
pub fn batch_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    t.select(Axis(0), idx)
}

/// Contiguous sub-batch `[start, end)`.
pub fn batch_range(t: &Tensor, start: usize, end: usize) -> Tensor {
    t.slice_axis(Axis(0), ndarray::Slice::from(start..end)).to_owned()
}

/// Central-difference gradient checking.
pub mod gradcheck {
    use super::*;

    /// Largest relative error between analytic and central-difference
    /// gradients of `f` with respect to each input, where relative error
    /// is `|a - n| / max(1, |a|, |n|)`.
    pub fn max_rel_error<F>(inputs: &[Tensor], step: f64, f: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
            let out = f(&mut g, &vars);
            g.value(out).sum()
        };
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.raw_dim()));
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[j] += step;
                minus[i].as_slice_mut().unwrap()[j] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.as_slice().unwrap()[j];
                let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                worst = worst.max(err);
            }
        }
        worst
    }
}
