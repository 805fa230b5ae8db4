//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operator appends one node whose inputs already live on the tape, so
//! the node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep that visits each node once. Gradients are only propagated
//! into nodes that depend on a leaf created with `requires_grad`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, Geometry};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => libm::tanhf(x),
            Activation::Sigmoid => 1.0 / (1.0 + libm::expf(-x)),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: Geometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geometry: Geometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    InstanceNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        mul: f32,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    ChannelsLast {
        input: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    L1 {
        a: Var,
        b: Var,
    },
    SquaredError {
        input: Var,
        target: f32,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one [`Tape::backward`] sweep, retained for leaves only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => Tensor::new(&self.shapes[var.0], g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Vec<f32> {
        let numel = self.shapes[var.0].iter().product();
        self.grads[var.0].take().unwrap_or_else(|| vec![0.0; numel])
    }
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::expf(v - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of an `n x k` matrix stored flat.
pub fn softmax(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        softmax_row(row, dst);
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input data that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        value.check_finite(op_name)?;
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node { value, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Strided, zero-padded cross-correlation. `input` is NCHW, `kernel` is OIHW.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, i, kh, kw) = self.value(kernel).dims4()?;
        if c != i {
            return Err(Error::dim("conv2d", format!("input has {c} channels, kernel expects {i}")));
        }
        let geometry = Geometry::new(c, h, w, kh, kw, stride, padding)?;
        let data = kernels::conv2d_forward(self.value(input).data(), n, &geometry, self.value(kernel).data(), o);
        let value = Tensor::new(&[n, o, geometry.out_h, geometry.out_w], data)?;
        self.push("conv2d", value, &[input, kernel], Op::Conv2d { input, kernel, geometry })
    }

    /// Transposed convolution with an `in x out x kh x kw` kernel; output side
    /// is `(H - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (i, o, kh, kw) = self.value(kernel).dims4()?;
        if c != i {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input has {c} channels, kernel expects {i}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv_transpose2d", "stride must be at least 1"));
        }
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::dim("conv_transpose2d", "padding exceeds output extent"))?;
        let ow = ((w - 1) * stride + kw)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::dim("conv_transpose2d", "padding exceeds output extent"))?;
        let geometry = Geometry::new(o, oh, ow, kh, kw, stride, padding)?;
        if geometry.out_h != h || geometry.out_w != w {
            return Err(Error::dim("conv_transpose2d", "inconsistent geometry"));
        }
        let data = kernels::conv_transpose2d_forward(self.value(input).data(), n, c, &geometry, self.value(kernel).data());
        let value = Tensor::new(&[n, o, oh, ow], data)?;
        self.push(
            "conv_transpose2d",
            value,
            &[input, kernel],
            Op::ConvTranspose2d { input, kernel, geometry },
        )
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let channels = *shape.get(1).ok_or_else(|| Error::dim("channel_bias", "needs a channel axis"))?;
        if self.value(bias).numel() != channels {
            return Err(Error::dim("channel_bias", format!("bias length {} vs {channels} channels", self.value(bias).numel())));
        }
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias).data();
        let mut data = self.value(input).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let v = b[i % channels];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        let value = Tensor::new(&shape, data)?;
        self.push("channel_bias", value, &[input, bias], Op::ChannelBias { input, bias })
    }

    /// Per-(sample, channel) plane normalization followed by a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gain: Var, bias: Var, epsilon: f32) -> Result<Var> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::contract("instance_norm epsilon must be positive"));
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::dim("instance_norm", format!("gain/bias must have {c} entries")));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let src = &x[p * plane..(p + 1) * plane];
            let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
            let var = src.iter().map(|&v| { let d = f64::from(v) - mean; d * d }).sum::<f64>() / plane as f64;
            let is = 1.0 / libm::sqrt(var + f64::from(epsilon));
            inv_std[p] = is as f32;
            let (gc, bc) = (g[p % c], b[p % c]);
            for j in 0..plane {
                let xh = ((f64::from(src[j]) - mean) * is) as f32;
                normalized[p * plane + j] = xh;
                out[p * plane + j] = gc * xh + bc;
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            "instance_norm",
            value,
            &[input, gain, bias],
            Op::InstanceNorm { input, gain, bias, normalized, inv_std },
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let value = self.value(input).map(|v| kind.apply(v));
        self.push("activation", value, &[input], Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    /// `input (N x F) * weights (F x G) + bias (G)`.
    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (n, f) = self.value(input).dims2()?;
        let (f2, g) = self.value(weights).dims2()?;
        if f != f2 || self.value(bias).numel() != g {
            return Err(Error::dim(
                "linear",
                format!(
                    "input {:?}, weights {:?}, bias {:?}",
                    self.value(input).shape(),
                    self.value(weights).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut out = vec![0.0; n * g];
        for row in out.chunks_mut(g) {
            row.copy_from_slice(self.value(bias).data());
        }
        kernels::gemm(n, f, g, self.value(input).data(), false, self.value(weights).data(), false, &mut out, 1.0);
        let value = Tensor::new(&[n, g], out)?;
        self.push("linear", value, &[input, weights, bias], Op::Linear { input, weights, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    /// `input * mul + add`, elementwise with scalar constants.
    pub fn affine(&mut self, input: Var, mul: f32, add: f32) -> Result<Var> {
        let value = self.value(input).map(|v| v * mul + add);
        self.push("affine", value, &[input], Op::Affine { input, mul })
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        self.affine(input, factor, 0.0)
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (n2, cb, h2, w2) = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::dim("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        self.push("concat_channels", value, &[a, b], Op::ConcatChannels { a, b })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, &[input], Op::Reshape { input })
    }

    /// `N x C x H x W` to `(N*H*W) x C`, one row per pixel.
    pub fn channels_last(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let x = self.value(input).data();
        let mut data = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    data[(s * plane + p) * c + ch] = x[(s * c + ch) * plane + p];
                }
            }
        }
        let value = Tensor::new(&[n * plane, c], data)?;
        self.push("channels_last", value, &[input], Op::ChannelsLast { input })
    }

    /// Scales every row of an `N x D` matrix to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let (_, d) = self.value(input).dims2()?;
        let x = self.value(input).data();
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut data = vec![0.0; x.len()];
        for (row, dst) in x.chunks(d).zip(data.chunks_mut(d)) {
            let norm = libm::sqrtf(row.iter().map(|v| v * v).sum::<f32>() + 1e-12);
            norms.push(norm);
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let value = Tensor::new(self.shape(input), data)?;
        self.push("l2_normalize", value, &[input], Op::L2Normalize { input, norms })
    }

    /// Mean over rows of `-sum_k t_k log softmax(logits)_k` for one-hot targets,
    /// given as class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::dim("softmax_cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("target class {bad} outside 0..{k}")));
        }
        let probs = softmax(self.value(logits).data(), k);
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = f64::from(max) + libm::log(row.iter().map(|&v| libm::exp(f64::from(v - max))).sum::<f64>());
            total += lse - f64::from(row[t]);
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        self.push(
            "softmax_cross_entropy",
            value,
            &[logits],
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Like [`Tape::softmax_cross_entropy`] but with an explicit one-hot target
    /// matrix; rows that are not one-hot violate the contract.
    pub fn softmax_cross_entropy_one_hot(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (n, k) = target.dims2()?;
        let mut classes = Vec::with_capacity(n);
        for row in target.data().chunks(k) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::contract("cross-entropy target row is not one-hot"));
            }
            classes.push(row.iter().position(|&v| v == 1.0).unwrap_or(0));
        }
        self.softmax_cross_entropy(logits, &classes)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("l1_loss", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let sum: f64 = x.iter().zip(y).map(|(p, q)| f64::from((p - q).abs())).sum();
        let value = Tensor::scalar((sum / x.len() as f64) as f32);
        self.push("l1_loss", value, &[a, b], Op::L1 { a, b })
    }

    /// Mean of `(input - target)^2` against a constant target.
    pub fn squared_error(&mut self, input: Var, target: f32) -> Result<Var> {
        let x = self.value(input).data();
        let sum: f64 = x.iter().map(|&v| { let d = f64::from(v - target); d * d }).sum();
        let value = Tensor::scalar((sum / x.len() as f64) as f32);
        self.push("squared_error", value, &[input], Op::SquaredError { input, target })
    }

    /// Mean of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let sum: f64 = x.iter().zip(y).map(|(p, q)| { let d = f64::from(p - q); d * d }).sum();
        let value = Tensor::scalar((sum / x.len() as f64) as f32);
        self.push("mse", value, &[a, b], Op::Mse { a, b })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).data().iter().map(|&v| f64::from(v)).sum();
        self.push("sum", Tensor::scalar(total as f32), &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).data();
        let total: f64 = x.iter().map(|&v| f64::from(v)).sum();
        let value = Tensor::scalar((total / x.len() as f64) as f32);
        self.push("mean", value, &[input], Op::Mean { input })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..count).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], var: Var) -> Option<&'a mut Vec<f32>> {
        let node = &self.nodes[var.0];
        if node.needs_grad {
            Some(accumulate(&mut grads[var.0], node.value.numel()))
        } else {
            None
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geometry } => {
                let n = self.shape(*input)[0];
                let out_c = self.shape(*kernel)[0];
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut gx = self.slot(grads, *input).map(core::mem::take);
                let mut gk = self.slot(grads, *kernel).map(core::mem::take);
                kernels::conv2d_backward(x, n, geometry, k, out_c, g, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(v) = gx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[kernel.0] = Some(v);
                }
            }
            Op::ConvTranspose2d { input, kernel, geometry } => {
                let (n, in_c) = (self.shape(*input)[0], self.shape(*input)[1]);
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut gx = self.slot(grads, *input).map(core::mem::take);
                let mut gk = self.slot(grads, *kernel).map(core::mem::take);
                kernels::conv_transpose2d_backward(x, n, in_c, geometry, k, g, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(v) = gx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gk {
                    grads[kernel.0] = Some(v);
                }
            }
            Op::ChannelBias { input, bias } => {
                let shape = self.shape(*input);
                let channels = shape[1];
                let inner: usize = shape[2..].iter().product();
                if let Some(gx) = self.slot(grads, *input) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        gb[i % channels] += chunk.iter().sum::<f32>();
                    }
                }
            }
            Op::InstanceNorm { input, gain, bias, normalized, inv_std } => {
                let (_, c, h, w) = self.value(*input).dims4().expect("checked in forward");
                let plane = h * w;
                let gain_v = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (p, chunk) in g.chunks(plane).enumerate() {
                        let xh = &normalized[p * plane..(p + 1) * plane];
                        gg[p % c] += chunk.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (p, chunk) in g.chunks(plane).enumerate() {
                        gb[p % c] += chunk.iter().sum::<f32>();
                    }
                }
                if let Some(gx) = self.slot(grads, *input) {
                    for (p, chunk) in g.chunks(plane).enumerate() {
                        let xh = &normalized[p * plane..(p + 1) * plane];
                        let gc = gain_v[p % c];
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for (d, x) in chunk.iter().zip(xh) {
                            let dxh = f64::from(d * gc);
                            mean_d += dxh;
                            mean_dx += dxh * f64::from(*x);
                        }
                        mean_d /= plane as f64;
                        mean_dx /= plane as f64;
                        let is = f64::from(inv_std[p]);
                        let dst = &mut gx[p * plane..(p + 1) * plane];
                        for j in 0..plane {
                            let dxh = f64::from(chunk[j] * gc);
                            dst[j] += (is * (dxh - mean_d - f64::from(xh[j]) * mean_dx)) as f32;
                        }
                    }
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *input) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                }
            }
            Op::Linear { input, weights, bias } => {
                let (n, f) = self.value(*input).dims2().expect("checked in forward");
                let gdim = self.shape(*weights)[1];
                let x = self.value(*input).data();
                let wv = self.value(*weights).data();
                if let Some(gx) = self.slot(grads, *input) {
                    kernels::gemm(n, gdim, f, g, false, wv, true, gx, 1.0);
                }
                if let Some(gw) = self.slot(grads, *weights) {
                    kernels::gemm(f, n, gdim, x, true, g, false, gw, 1.0);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(gdim) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gx) = self.slot(grads, v) {
                        gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Affine { input, mul } => {
                if let Some(gx) = self.slot(grads, *input) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * mul);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("checked in forward");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if let Some(ga) = self.slot(grads, *a) {
                    for s in 0..n {
                        let src = &g[s * stride..s * stride + ca * plane];
                        ga[s * ca * plane..(s + 1) * ca * plane].iter_mut().zip(src).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for s in 0..n {
                        let src = &g[s * stride + ca * plane..(s + 1) * stride];
                        gb[s * cb * plane..(s + 1) * cb * plane].iter_mut().zip(src).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(gx) = self.slot(grads, *input) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::ChannelsLast { input } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("checked in forward");
                let plane = h * w;
                if let Some(gx) = self.slot(grads, *input) {
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                gx[(s * c + ch) * plane + p] += g[(s * plane + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                let d = self.shape(*input)[1];
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *input) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len();
                let scale = g[0] / n as f32;
                if let Some(gx) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gx[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::L1 { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] / x.len() as f32;
                let sign = |d: f32| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..x.len() {
                        ga[i] += scale * sign(x[i] - y[i]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..x.len() {
                        gb[i] -= scale * sign(x[i] - y[i]);
                    }
                }
            }
            Op::SquaredError { input, target } => {
                let x = self.value(*input).data();
                let scale = 2.0 * g[0] / x.len() as f32;
                if let Some(gx) = self.slot(grads, *input) {
                    for i in 0..x.len() {
                        gx[i] += scale * (x[i] - target);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / x.len() as f32;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..x.len() {
                        ga[i] += scale * (x[i] - y[i]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..x.len() {
                        gb[i] -= scale * (x[i] - y[i]);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(gx) = self.slot(grads, *input) {
                    gx.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel() as f32;
                if let Some(gx) = self.slot(grads, *input) {
                    gx.iter_mut().for_each(|p| *p += g[0] / n);
                }
            }
        }
    }
}
