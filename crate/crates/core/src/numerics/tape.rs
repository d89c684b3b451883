//! Reverse-mode differentiation over a linear record of coarse-grained ops.
//!
//! A [`Tape`] lives for one forward pass. Each op appends its output value and
//! whatever forward context its backward rule needs; [`Tape::backward`]
//! consumes the tape and sweeps the records in reverse, summing gradient
//! contributions from every consumer of a node.

use std::sync::Arc;

use serde::Serialize;

use super::kernels::{correlate_accum, dot, gemm_nn, gemm_nt, gemm_tn};
use super::spectral::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    AddBias,
    Mul,
    Scale,
    Sum,
    Reshape,
    Permute,
    Softmax,
    Activation,
    PRelu,
    LayerNorm,
    BatchNorm,
    ConvTemporal,
    DepthwiseSpatial,
    Mask,
    MeanPool,
    SegmentMean,
    Gatv2,
    CrossEntropy,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        let kind = match name {
            "matmul" => MatMul,
            "batch_matmul" => BatchMatMul,
            "add" => Add,
            "add_bias" => AddBias,
            "mul" => Mul,
            "scale" => Scale,
            "sum" => Sum,
            "reshape" => Reshape,
            "permute" => Permute,
            "softmax" => Softmax,
            "activation" => Activation,
            "prelu" => PRelu,
            "layer_norm" => LayerNorm,
            "batch_norm" => BatchNorm,
            "conv_temporal" => ConvTemporal,
            "depthwise_spatial" => DepthwiseSpatial,
            "mask" => Mask,
            "mean_pool" => MeanPool,
            "segment_mean" => SegmentMean,
            "gatv2" => Gatv2,
            "cross_entropy" => CrossEntropy,
            _ => return None,
        };
        Some(kind)
    }
}

/// Fixed-parameter pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Elu { alpha: f64 },
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k - 1` split as `(k-1)/2` before and the rest after.
    Same,
    Valid,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }
}

enum Record {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Softmax { x: Var, axis: usize },
    Activation { x: Var, kind: Activation },
    PRelu { x: Var, slope: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    ConvTemporal { x: Var, kernel: Var, pad_left: usize, spectra: Option<Box<spectral::Spectra>> },
    DepthwiseSpatial { x: Var, kernel: Var },
    Mask { x: Var, mask: Vec<f64>, group: usize },
    MeanPool { x: Var, axis: usize },
    SegmentMean { x: Var, membership: Vec<usize>, counts: Vec<usize> },
    Gatv2(Box<Gatv2Record>),
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64> },
}

struct Gatv2Record {
    xl: Var,
    xr: Var,
    att: Var,
    incoming: Arc<Vec<Vec<(usize, usize)>>>,
    heads: usize,
    slope: f64,
    alpha: Vec<f64>,
}

impl Record {
    fn kind(&self) -> OpKind {
        match self {
            Record::Leaf => OpKind::Leaf,
            Record::MatMul { .. } => OpKind::MatMul,
            Record::BatchMatMul { .. } => OpKind::BatchMatMul,
            Record::Add { .. } => OpKind::Add,
            Record::AddBias { .. } => OpKind::AddBias,
            Record::Mul { .. } => OpKind::Mul,
            Record::Scale { .. } => OpKind::Scale,
            Record::Sum { .. } => OpKind::Sum,
            Record::Reshape { .. } => OpKind::Reshape,
            Record::Permute { .. } => OpKind::Permute,
            Record::Softmax { .. } => OpKind::Softmax,
            Record::Activation { .. } => OpKind::Activation,
            Record::PRelu { .. } => OpKind::PRelu,
            Record::LayerNorm { .. } => OpKind::LayerNorm,
            Record::BatchNorm { .. } => OpKind::BatchNorm,
            Record::ConvTemporal { .. } => OpKind::ConvTemporal,
            Record::DepthwiseSpatial { .. } => OpKind::DepthwiseSpatial,
            Record::Mask { .. } => OpKind::Mask,
            Record::MeanPool { .. } => OpKind::MeanPool,
            Record::SegmentMean { .. } => OpKind::SegmentMean,
            Record::Gatv2(_) => OpKind::Gatv2,
            Record::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    record: Record,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of one op kind (scales its input gradients
    /// by 1.5). Used only to prove the gradient checker notices.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Record::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Record::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].record.kind()
    }

    /// Kinds of every recorded node, in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.record.kind()).collect()
    }

    /// Side of the kink for every input to a piecewise-linear op (PReLU,
    /// LeakyReLU, GATv2 scores), in tape order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.record {
                Record::PRelu { x, .. } | Record::Activation { x, kind: Activation::LeakyRelu { .. } } => {
                    out.extend(self.value(*x).data().iter().map(|&v| v > 0.0));
                }
                Record::Gatv2(rec) => {
                    let xl = self.value(rec.xl).data();
                    let xr = self.value(rec.xr).data();
                    let width = self.shape(rec.xl)[1];
                    for (i, inc) in rec.incoming.iter().enumerate() {
                        for &(_, j) in inc {
                            out.extend((0..width).map(|c| xl[i * width + c] + xr[j * width + c] > 0.0));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Attention coefficients of a GATv2 node, laid out `[edge][head]` in
    /// the order edges were grouped by destination.
    pub fn attention_weights(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].record {
            Record::Gatv2(rec) => Some(&rec.alpha),
            _ => None,
        }
    }

    fn push_raw(&mut self, value: Tensor, record: Record, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, record: Record, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, record, requires_grad)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul of {sa:?} and {sb:?}: inner dimensions must agree"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Record::MatMul { a, b }, &[a, b]))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!(
                "batch_matmul of {sa:?} and {sb:?}: batch and inner dimensions must agree"
            )));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for p in 0..bs {
            gemm_nn(
                &mut out[p * m * n..(p + 1) * m * n],
                &ad[p * m * k..(p + 1) * m * k],
                &bd[p * k * n..(p + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(value, Record::BatchMatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Record::Add { a, b }, &[a, b]))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(self.push(value, Record::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Record::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(value, Record::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Record::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Record::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "{perm:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let value = permute_tensor(self.value(x), perm);
        Ok(self.push(value, Record::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let input = self.value(x);
        if axis >= input.ndim() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                input.shape()
            )));
        }
        if !input.is_finite() {
            return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
        }
        let (outer, n, inner) = input.axis_strides(axis);
        let src = input.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * n * inner + t * inner + i;
                let max = (0..n).map(|t| src[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..n {
                    let e = (src[at(t)] - max).exp();
                    out[at(t)] = e;
                    total += e;
                }
                for t in 0..n {
                    out[at(t)] /= total;
                }
            }
        }
        let value = Tensor::new(input.shape().to_vec(), out)?;
        Ok(self.push(value, Record::Softmax { x, axis }, &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
        self.push(value, Record::Activation { x, kind }, &[x])
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        self.activation(x, Activation::Elu { alpha })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu { slope })
    }

    /// PReLU with one learnable slope per index of `axis` (or a single shared
    /// slope when `slope` has one element).
    pub fn prelu(&mut self, x: Var, slope: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("prelu axis {axis} out of range for {shape:?}")));
        }
        let ns = self.value(slope).numel();
        if ns != 1 && ns != shape[axis] {
            return Err(Error::Shape(format!(
                "prelu slope of {ns} entries does not match axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = self.value(x).axis_strides(axis);
        let a = self.value(slope).data().to_vec();
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for o in 0..outer {
            for c in 0..n {
                let ac = a[if ns == 1 { 0 } else { c }];
                let base = (o * n + c) * inner;
                for v in &mut data[base..base + inner] {
                    if *v <= 0.0 {
                        *v *= ac;
                    }
                }
            }
        }
        Ok(self.push(value, Record::PRelu { x, slope, axis }, &[x, slope]))
    }

    // ---- normalization --------------------------------------------------

    /// Normalizes over the last axis, then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine params {:?}/{:?} do not match feature dim {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Record::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization over every axis except axis 1 (the channel axis).
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch mean and unbiased variance into `state` with its momentum.
    /// Eval mode uses the running statistics only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch_norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm params do not match {c} channels of {shape:?}"
            )));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::Statistics(
                "batch of size 1 has no defined variance in train mode".into(),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let count = (n * inner) as f64;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let blocks = (0..n).map(|s| (s * c + ch) * inner);
            let (mean, is) = match mode {
                Mode::Train => {
                    let mean = blocks
                        .clone()
                        .map(|base| src[base..base + inner].iter().sum::<f64>())
                        .sum::<f64>()
                        / count;
                    let sq = blocks
                        .clone()
                        .map(|base| {
                            src[base..base + inner]
                                .iter()
                                .map(|v| (v - mean) * (v - mean))
                                .sum::<f64>()
                        })
                        .sum::<f64>();
                    let var = sq / count;
                    let m = state.momentum;
                    state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean;
                    state.running_var[ch] =
                        (1.0 - m) * state.running_var[ch] + m * sq / (count - 1.0);
                    (mean, 1.0 / (var + eps).sqrt())
                }
                Mode::Eval => (
                    state.running_mean[ch],
                    1.0 / (state.running_var[ch] + eps).sqrt(),
                ),
            };
            inv_std[ch] = is;
            for base in blocks {
                for k in base..base + inner {
                    let h = (src[k] - mean) * is;
                    xhat[k] = h;
                    out[k] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Record::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- convolutions ---------------------------------------------------

    /// 1-D cross-correlation along time: `[N, F_in, T] ⊛ [F_out, F_in, k]`.
    pub fn conv_temporal(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::Shape(format!(
                "conv_temporal of input {sx:?} with kernel {sk:?}: expected [N, F_in, T] and [F_out, F_in, k]"
            )));
        }
        let (n, cin, t_in) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sk[0], sk[2]);
        let (pad_left, pad_right) = match padding {
            Padding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let padded = t_in + pad_left + pad_right;
        if k > padded {
            return Err(Error::Shape(format!(
                "kernel of length {k} exceeds padded input length {padded}"
            )));
        }
        let t_out = padded - k + 1;
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        if k >= spectral::MIN_KERNEL {
            let dims = ConvDims { n, cin, t_in, cout, k, pad_left, t_out };
            let (out, spectra) = spectral::forward(xd, wd, dims);
            let value = Tensor::new(vec![n, cout, t_out], out)?;
            let record = Record::ConvTemporal { x, kernel, pad_left, spectra: Some(Box::new(spectra)) };
            return Ok(self.push(value, record, &[x, kernel]));
        }
        let mut out = vec![0.0; n * cout * t_out];
        let mut xp = vec![0.0; cin * padded];
        for s in 0..n {
            for i in 0..cin {
                xp[i * padded + pad_left..i * padded + pad_left + t_in]
                    .copy_from_slice(&xd[(s * cin + i) * t_in..(s * cin + i + 1) * t_in]);
            }
            for o in 0..cout {
                let orow = &mut out[(s * cout + o) * t_out..(s * cout + o + 1) * t_out];
                for i in 0..cin {
                    let w = &wd[(o * cin + i) * k..(o * cin + i + 1) * k];
                    correlate_accum(orow, &xp[i * padded..(i + 1) * padded], w);
                }
            }
        }
        let value = Tensor::new(vec![n, cout, t_out], out)?;
        Ok(self.push(value, Record::ConvTemporal { x, kernel, pad_left, spectra: None }, &[x, kernel]))
    }

    /// Per-feature-map convolution across the channel axis of `[B, C, F, T]`
    /// with kernel `[F, k]` (odd `k`, same zero padding, no cross-map mixing).
    pub fn depthwise_conv_spatial(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 2 || sk[0] != sx[2] || sk[1] % 2 == 0 {
            return Err(Error::Shape(format!(
                "depthwise_conv_spatial of input {sx:?} with kernel {sk:?}: expected [B, C, F, T] and [F, odd k]"
            )));
        }
        let (b, c, f, t) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sk[1];
        let pad = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        let mut out = vec![0.0; xd.len()];
        for g in 0..b {
            for ch in 0..c {
                for m in 0..f {
                    let dst = ((g * c + ch) * f + m) * t;
                    for j in 0..k {
                        let src_ch = ch as isize + j as isize - pad as isize;
                        if src_ch < 0 || src_ch >= c as isize {
                            continue;
                        }
                        let src = ((g * c + src_ch as usize) * f + m) * t;
                        let w = wd[m * k + j];
                        for u in 0..t {
                            out[dst + u] += w * xd[src + u];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Record::DepthwiseSpatial { x, kernel }, &[x, kernel]))
    }

    // ---- masking and pooling --------------------------------------------

    /// Multiplies each contiguous block of `group` elements by `mask[i]`.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>, group: usize) -> Result<Var> {
        let numel = self.value(x).numel();
        if group == 0 || mask.len() * group != numel {
            return Err(Error::Shape(format!(
                "mask of {} groups × {group} does not cover {numel} elements",
                mask.len()
            )));
        }
        let mut value = self.value(x).clone();
        for (block, &m) in value.data_mut().chunks_exact_mut(group).zip(&mask) {
            block.iter_mut().for_each(|v| *v *= m);
        }
        Ok(self.push(value, Record::Mask { x, mask, group }, &[x]))
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let input = self.value(x);
        if axis >= input.ndim() {
            return Err(Error::Shape(format!(
                "mean_pool axis {axis} out of range for {:?}",
                input.shape()
            )));
        }
        let (outer, n, inner) = input.axis_strides(axis);
        let src = input.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let base = (o * n + t) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = input.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Record::MeanPool { x, axis }, &[x]))
    }

    /// Mean of the rows of `[N, F]` that share a group id, giving `[G, F]`.
    pub fn segment_mean(&mut self, x: Var, membership: &[usize], groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || membership.len() != shape[0] {
            return Err(Error::Shape(format!(
                "segment_mean over {shape:?} with {} membership entries",
                membership.len()
            )));
        }
        let f = shape[1];
        let mut counts = vec![0usize; groups];
        for &g in membership {
            if g >= groups {
                return Err(Error::Index(format!("group id {g} ≥ group count {groups}")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("graph {empty} has no nodes to pool")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; groups * f];
        for (r, &g) in membership.iter().enumerate() {
            for c in 0..f {
                out[g * f + c] += src[r * f + c];
            }
        }
        for g in 0..groups {
            for c in 0..f {
                out[g * f + c] /= counts[g] as f64;
            }
        }
        let value = Tensor::new(vec![groups, f], out)?;
        Ok(self.push(
            value,
            Record::SegmentMean { x, membership: membership.to_vec(), counts },
            &[x],
        ))
    }

    // ---- graph attention ------------------------------------------------

    /// Multi-head GATv2 aggregation.
    ///
    /// `target` is the `[N, H·F]` projection of the receiving node, `source`
    /// the `[N, H·F]` projection of the sending node, `att` the `[H, F]`
    /// scoring vectors, and `edges` `(src, dst)` pairs. For each head,
    /// `e_ij = att · LeakyReLU(target_i + source_j)`, `α` is the softmax of `e`
    /// over the incoming edges of `i`, and `out_i = Σ_j α_ij · source_j`.
    pub fn gatv2_attention(
        &mut self,
        target: Var,
        source: Var,
        att: Var,
        edges: &[(usize, usize)],
        slope: f64,
    ) -> Result<Var> {
        let (st, ss, sa) = (
            self.shape(target).to_vec(),
            self.shape(source).to_vec(),
            self.shape(att).to_vec(),
        );
        if st.len() != 2 || st != ss || sa.len() != 2 || sa[0] * sa[1] != st[1] {
            return Err(Error::Shape(format!(
                "gatv2 projections {st:?}/{ss:?} incompatible with attention vectors {sa:?}"
            )));
        }
        let (n, heads, fh) = (st[0], sa[0], sa[1]);
        let mut incoming = vec![Vec::new(); n];
        for (e, &(src, dst)) in edges.iter().enumerate() {
            if src >= n || dst >= n {
                return Err(Error::Index(format!(
                    "edge {e} ({src} → {dst}) references a node outside 0..{n}"
                )));
            }
            incoming[dst].push((e, src));
        }
        let incoming = Arc::new(incoming);
        let xl = self.value(target).data();
        let xr = self.value(source).data();
        let a = self.value(att).data();
        let width = heads * fh;
        let mut alpha = vec![0.0; edges.len() * heads];
        let mut out = vec![0.0; n * width];
        let mut scores = Vec::new();
        let mut pre = vec![0.0; fh];
        for i in 0..n {
            for h in 0..heads {
                let off = h * fh;
                let ah = &a[off..off + fh];
                let xli = &xl[i * width + off..i * width + off + fh];
                scores.clear();
                for &(_, j) in &incoming[i] {
                    let xrj = &xr[j * width + off..j * width + off + fh];
                    for c in 0..fh {
                        let s = xli[c] + xrj[c];
                        pre[c] = if s > 0.0 { s } else { slope * s };
                    }
                    scores.push(dot(ah, &pre));
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter_mut().map(|s| {
                    *s = (*s - max).exp();
                    *s
                }).sum();
                let oi = &mut out[i * width + off..i * width + off + fh];
                for (&(e, j), s) in incoming[i].iter().zip(&scores) {
                    let w = s / total;
                    alpha[e * heads + h] = w;
                    let xrj = &xr[j * width + off..j * width + off + fh];
                    for c in 0..fh {
                        oi[c] += w * xrj[c];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(
            value,
            Record::Gatv2(Box::new(Gatv2Record {
                xl: target,
                xr: source,
                att,
                incoming,
                heads,
                slope,
                alpha,
            })),
            &[target, source, att],
        ))
    }

    // ---- loss -----------------------------------------------------------

    /// Mean label-smoothed cross-entropy of `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, probs) = smoothed_ce_forward(self.value(logits), targets, smoothing)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Record::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.record, Record::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let mut sink = GradSink {
                grads: &mut grads,
                nodes: &self.nodes,
                factor: if self.fault == Some(node.record.kind()) { 1.5 } else { 1.0 },
            };
            self.backward_node(id, &gout, &mut sink);
            // Interior nodes do not keep their gradient once propagated.
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, gout: &Tensor, sink: &mut GradSink<'_>) {
        let node = &self.nodes[id];
        let g = gout.data();
        match &node.record {
            Record::Leaf => {}
            Record::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if sink.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(&mut da, g, self.value(*b).data(), m, n, k);
                    sink.add(*a, da);
                }
                if sink.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(&mut db, self.value(*a).data(), g, k, m, n);
                    sink.add(*b, db);
                }
            }
            Record::BatchMatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if sink.wants(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for p in 0..bs {
                        gemm_nt(
                            &mut da[p * m * k..(p + 1) * m * k],
                            &g[p * m * n..(p + 1) * m * n],
                            &bd[p * k * n..(p + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    sink.add(*a, da);
                }
                if sink.wants(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for p in 0..bs {
                        gemm_tn(
                            &mut db[p * k * n..(p + 1) * k * n],
                            &ad[p * m * k..(p + 1) * m * k],
                            &g[p * m * n..(p + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                    }
                    sink.add(*b, db);
                }
            }
            Record::Add { a, b } => {
                sink.add(*a, g.to_vec());
                sink.add(*b, g.to_vec());
            }
            Record::AddBias { x, bias } => {
                sink.add(*x, g.to_vec());
                if sink.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    sink.add(*bias, db);
                }
            }
            Record::Mul { a, b } => {
                if sink.wants(*a) {
                    sink.add(*a, zip_map(g, self.value(*b).data(), |x, y| x * y));
                }
                if sink.wants(*b) {
                    sink.add(*b, zip_map(g, self.value(*a).data(), |x, y| x * y));
                }
            }
            Record::Scale { x, factor } => {
                sink.add(*x, g.iter().map(|v| v * factor).collect());
            }
            Record::Sum { x } => {
                sink.add(*x, vec![g[0]; self.value(*x).numel()]);
            }
            Record::Reshape { x } => sink.add(*x, g.to_vec()),
            Record::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                sink.add(*x, permute_tensor(gout, &inverse).into_data());
            }
            Record::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = node.value.axis_strides(*axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + i;
                        let s: f64 = (0..n).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..n {
                            dx[at(t)] = y[at(t)] * (g[at(t)] - s);
                        }
                    }
                }
                sink.add(*x, dx);
            }
            Record::Activation { x, kind } => {
                let xv = self.value(*x).data();
                sink.add(*x, zip_map(g, xv, |gv, xi| gv * kind.derivative(xi)));
            }
            Record::PRelu { x, slope, axis } => {
                let xin = self.value(*x);
                let (outer, n, inner) = xin.axis_strides(*axis);
                let a = self.value(*slope).data();
                let shared = a.len() == 1;
                let xv = xin.data();
                let mut dx = vec![0.0; xv.len()];
                let mut da = vec![0.0; a.len()];
                for o in 0..outer {
                    for c in 0..n {
                        let slot = if shared { 0 } else { c };
                        let base = (o * n + c) * inner;
                        for k in base..base + inner {
                            if xv[k] > 0.0 {
                                dx[k] = g[k];
                            } else {
                                dx[k] = g[k] * a[slot];
                                da[slot] += g[k] * xv[k];
                            }
                        }
                    }
                }
                sink.add(*x, dx);
                sink.add(*slope, da);
            }
            Record::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).numel();
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dh = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[rows.clone()], &xhat[rows.clone()]);
                    for c in 0..d {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                        dh[c] = gr[c] * gm[c];
                    }
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let dn = d as f64;
                    for c in 0..d {
                        dx[r * d + c] = is / dn * (dn * dh[c] - s1 - hr[c] * s2);
                    }
                }
                sink.add(*x, dx);
                sink.add(*gamma, dg);
                sink.add(*beta, db);
            }
            Record::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gm = self.value(*gamma).data();
                let count = (n * inner) as f64;
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let blocks = || (0..n).map(move |s| (s * c + ch) * inner);
                    for base in blocks() {
                        for k in base..base + inner {
                            dg[ch] += g[k] * xhat[k];
                            db[ch] += g[k];
                        }
                    }
                    let scale = gm[ch] * inv_std[ch];
                    for base in blocks() {
                        for k in base..base + inner {
                            dx[k] = if *batch_stats {
                                scale / count * (count * g[k] - db[ch] - xhat[k] * dg[ch])
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                sink.add(*x, dx);
                sink.add(*gamma, dg);
                sink.add(*beta, db);
            }
            Record::ConvTemporal { x, kernel, pad_left, spectra } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let (n, cin, t_in) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sk[0], sk[2]);
                let t_out = node.value.dim(2);
                let want_x = sink.wants(*x);
                let want_w = sink.wants(*kernel);
                if let Some(sp) = spectra {
                    let dims = ConvDims { n, cin, t_in, cout, k, pad_left: *pad_left, t_out };
                    let (dx, dw) = spectral::backward(g, sp, dims, want_x, want_w);
                    if want_x {
                        sink.add(*x, dx);
                    }
                    if want_w {
                        sink.add(*kernel, dw);
                    }
                    return;
                }
                let padded = t_out + k - 1;
                let xd = self.value(*x).data();
                let wd = self.value(*kernel).data();
                let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
                let mut dw = vec![0.0; if want_w { wd.len() } else { 0 }];
                let mut xp = vec![0.0; cin * padded];
                // gradient rows padded by k-1 on each side for the full correlation
                let glen = t_out + 2 * (k - 1);
                let mut gp = vec![0.0; cout * glen];
                let wflip: Vec<f64> = if want_x {
                    wd.chunks_exact(k).flat_map(|w| w.iter().rev().copied()).collect()
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    for o in 0..cout {
                        gp[o * glen + k - 1..o * glen + k - 1 + t_out]
                            .copy_from_slice(&g[(s * cout + o) * t_out..(s * cout + o + 1) * t_out]);
                    }
                    if want_w {
                        for i in 0..cin {
                            let row = &mut xp[i * padded..(i + 1) * padded];
                            row.fill(0.0);
                            row[*pad_left..*pad_left + t_in]
                                .copy_from_slice(&xd[(s * cin + i) * t_in..(s * cin + i + 1) * t_in]);
                        }
                        for o in 0..cout {
                            let go = &g[(s * cout + o) * t_out..(s * cout + o + 1) * t_out];
                            for i in 0..cin {
                                correlate_accum(
                                    &mut dw[(o * cin + i) * k..(o * cin + i + 1) * k],
                                    &xp[i * padded..(i + 1) * padded],
                                    go,
                                );
                            }
                        }
                    }
                    if want_x {
                        for i in 0..cin {
                            let di = &mut dx[(s * cin + i) * t_in..(s * cin + i + 1) * t_in];
                            for o in 0..cout {
                                let start = o * glen + pad_left;
                                correlate_accum(
                                    di,
                                    &gp[start..start + t_in + k - 1],
                                    &wflip[(o * cin + i) * k..(o * cin + i + 1) * k],
                                );
                            }
                        }
                    }
                }
                if want_x {
                    sink.add(*x, dx);
                }
                if want_w {
                    sink.add(*kernel, dw);
                }
            }
            Record::DepthwiseSpatial { x, kernel } => {
                let sx = self.shape(*x);
                let (b, c, f, t) = (sx[0], sx[1], sx[2], sx[3]);
                let k = self.shape(*kernel)[1];
                let pad = k / 2;
                let xd = self.value(*x).data();
                let wd = self.value(*kernel).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for gi in 0..b {
                    for ch in 0..c {
                        for m in 0..f {
                            let dst = ((gi * c + ch) * f + m) * t;
                            for j in 0..k {
                                let src_ch = ch as isize + j as isize - pad as isize;
                                if src_ch < 0 || src_ch >= c as isize {
                                    continue;
                                }
                                let src = ((gi * c + src_ch as usize) * f + m) * t;
                                let w = wd[m * k + j];
                                let gseg = &g[dst..dst + t];
                                dw[m * k + j] += dot(gseg, &xd[src..src + t]);
                                for u in 0..t {
                                    dx[src + u] += w * gseg[u];
                                }
                            }
                        }
                    }
                }
                sink.add(*x, dx);
                sink.add(*kernel, dw);
            }
            Record::Mask { x, mask, group } => {
                let mut dx = g.to_vec();
                for (block, &m) in dx.chunks_exact_mut(*group).zip(mask) {
                    block.iter_mut().for_each(|v| *v *= m);
                }
                sink.add(*x, dx);
            }
            Record::MeanPool { x, axis } => {
                let (outer, n, inner) = self.value(*x).axis_strides(*axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for t in 0..n {
                        for i in 0..inner {
                            dx[(o * n + t) * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                sink.add(*x, dx);
            }
            Record::SegmentMean { x, membership, counts } => {
                let f = self.shape(*x)[1];
                let mut dx = vec![0.0; membership.len() * f];
                for (r, &gid) in membership.iter().enumerate() {
                    for c in 0..f {
                        dx[r * f + c] = g[gid * f + c] / counts[gid] as f64;
                    }
                }
                sink.add(*x, dx);
            }
            Record::Gatv2(rec) => {
                let xl = self.value(rec.xl).data();
                let xr = self.value(rec.xr).data();
                let a = self.value(rec.att).data();
                let heads = rec.heads;
                let fh = a.len() / heads;
                let width = heads * fh;
                let mut dxl = vec![0.0; xl.len()];
                let mut dxr = vec![0.0; xr.len()];
                let mut da = vec![0.0; a.len()];
                let mut dalpha = Vec::new();
                for (i, inc) in rec.incoming.iter().enumerate() {
                    for h in 0..heads {
                        let off = h * fh;
                        let gi = &g[i * width + off..i * width + off + fh];
                        dalpha.clear();
                        for &(e, j) in inc {
                            let w = rec.alpha[e * heads + h];
                            let xrj = &xr[j * width + off..j * width + off + fh];
                            dalpha.push(dot(gi, xrj));
                            let dxrj = &mut dxr[j * width + off..j * width + off + fh];
                            for c in 0..fh {
                                dxrj[c] += w * gi[c];
                            }
                        }
                        let weighted: f64 = inc
                            .iter()
                            .zip(&dalpha)
                            .map(|(&(e, _), d)| rec.alpha[e * heads + h] * d)
                            .sum();
                        for (&(e, j), &d) in inc.iter().zip(&dalpha) {
                            let de = rec.alpha[e * heads + h] * (d - weighted);
                            for c in 0..fh {
                                let s = xl[i * width + off + c] + xr[j * width + off + c];
                                let (u, du) = if s > 0.0 { (s, 1.0) } else { (rec.slope * s, rec.slope) };
                                da[off + c] += de * u;
                                let ds = de * a[off + c] * du;
                                dxl[i * width + off + c] += ds;
                                dxr[j * width + off + c] += ds;
                            }
                        }
                    }
                }
                sink.add(rec.xl, dxl);
                sink.add(rec.xr, dxr);
                sink.add(rec.att, da);
            }
            Record::CrossEntropy { logits, targets, smoothing, probs } => {
                let k = self.shape(*logits)[1];
                let dl = smoothed_ce_grad(probs, targets, *smoothing, k);
                sink.add(*logits, dl.into_iter().map(|v| v * g[0]).collect());
            }
        }
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op} of {:?} and {:?}: shapes must match",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

struct GradSink<'a> {
    grads: &'a mut Vec<Option<Tensor>>,
    nodes: &'a [Node],
    factor: f64,
}

impl GradSink<'_> {
    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn add(&mut self, var: Var, mut data: Vec<f64>) {
        if !self.wants(var) {
            return;
        }
        if self.factor != 1.0 {
            data.iter_mut().for_each(|v| *v *= self.factor);
        }
        let shape = self.nodes[var.0].value.shape().to_vec();
        let contribution = Tensor::new(shape, data).expect("gradient matches value shape");
        match &mut self.grads[var.0] {
            Some(acc) => acc.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for a in (0..nd - 1).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for a in (0..nd).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

/// Loss and softmax probabilities of label-smoothed cross-entropy.
pub(crate) fn smoothed_ce_forward(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Param(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "cross-entropy logits {shape:?} against {} targets",
            targets.len()
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Param(format!("target class {bad} outside 0..{k}")));
    }
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for c in 0..k {
            let logp = row[c] - lse;
            probs[r * k + c] = logp.exp();
            let y = smoothing / k as f64 + if c == target { 1.0 - smoothing } else { 0.0 };
            loss -= y * logp;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy loss is not finite".into()));
    }
    Ok((loss / b as f64, probs))
}

pub(crate) fn smoothed_ce_grad(probs: &[f64], targets: &[usize], smoothing: f64, k: usize) -> Vec<f64> {
    let b = targets.len() as f64;
    let mut d = probs.to_vec();
    for (r, &target) in targets.iter().enumerate() {
        for c in 0..k {
            let y = smoothing / k as f64 + if c == target { 1.0 - smoothing } else { 0.0 };
            d[r * k + c] = (d[r * k + c] - y) / b;
        }
    }
    d
}
