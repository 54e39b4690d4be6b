//! Reverse-mode autodiff on an append-only tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse. Because every op's inputs precede it on the tape, a single
//! reverse sweep is a valid topological order. The op set is exactly what the
//! training stack needs: affine layers, ReLU, the two normalizations,
//! convolution/pooling, layout changes, and softmax cross-entropy.
//!
//! All values are `f64`; gradient checks against finite differences live in
//! the integration tests.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::norm;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValId(usize);

impl ValId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a @ b` for `[m,k] x [k,n]`.
    Matmul { a: ValId, b: ValId },
    /// `[b,n] + [n]`, bias broadcast over rows.
    AddBias { x: ValId, bias: ValId },
    Add { a: ValId, b: ValId },
    Sub { a: ValId, b: ValId },
    /// Elementwise product, same shapes.
    Mul { a: ValId, b: ValId },
    Scale { x: ValId, factor: f64 },
    /// `x + c` for a constant tensor `c`; gradients pass through unchanged.
    AddConst { x: ValId },
    Relu { x: ValId },
    /// Sum of all elements, yielding shape `[1]`.
    Sum { x: ValId },
    /// Mean of the first `count` entries of a rank-1 value.
    MeanPrefix { x: ValId, count: usize },
    Reshape { x: ValId },
    /// Per-example normalization over features of `[b,n]`.
    LayerNorm { x: ValId, gamma: ValId, beta: ValId, eps: f64 },
    /// Per-feature normalization over the batch of `[b,n]`.
    BatchNorm { x: ValId, gamma: ValId, beta: ValId, eps: f64 },
    /// Per-row losses `[b]` from logits `[b,n]` and integer labels.
    SoftmaxCrossEntropy { logits: ValId, labels: Vec<usize> },
    Conv2d { x: ValId, w: ValId, bias: ValId, dims: ConvDims },
    MaxPool2d { x: ValId, size: usize },
    /// `[b,c,h,w] -> [b*h*w, c]`, so channel statistics become column statistics.
    ChannelsLast { x: ValId },
    /// Inverse of `ChannelsLast` for the given plane dimensions.
    ChannelsFirst { x: ValId, channels: usize, height: usize, width: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`ValId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `id`, if the output depends on it.
    pub fn wrt(&self, id: ValId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Gradient with respect to `id`, or zeros of that value's shape.
    pub fn wrt_or_zeros(&self, tape: &Tape, id: ValId) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(id)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor) -> ValId {
        self.push(Op::Leaf, value)
    }

    /// The computed value of a node.
    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValId {
        self.nodes.push(Node { op, value });
        ValId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: ValId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} must be rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a @ b` for `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(out, vec![m, n])?))
    }

    /// Adds a length-`n` bias to every row of a `[b,n]` value.
    pub fn add_bias(&mut self, x: ValId, bias: ValId) -> Result<ValId> {
        let (b, n) = self.dims2(x, "add_bias input")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match row width {n}",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let bias_v = self.value(bias).data();
        for i in 0..b {
            for j in 0..n {
                out[i * n + j] += bias_v[j];
            }
        }
        Ok(self.push(Op::AddBias { x, bias }, Tensor::new(out, vec![b, n])?))
    }

    fn binary_same_shape(&mut self, a: ValId, b: ValId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name} operand shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::new(out, shape)?))
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub { a, b }, Tensor::new(out, shape)?))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::new(out, shape)?))
    }

    pub fn scale(&mut self, x: ValId, factor: f64) -> Result<ValId> {
        let mut t = self.value(x).clone();
        t.scale_in_place(factor);
        Ok(self.push(Op::Scale { x, factor }, t))
    }

    /// `x + delta` for a constant (untracked) tensor of the same shape.
    pub fn add_const(&mut self, x: ValId, delta: &Tensor) -> Result<ValId> {
        if self.shape(x) != delta.shape() {
            return Err(Error::shape(format!(
                "add_const shapes {:?} vs {:?}",
                self.shape(x),
                delta.shape()
            )));
        }
        let mut t = self.value(x).clone();
        t.add_assign(delta)?;
        Ok(self.push(Op::AddConst { x }, t))
    }

    pub fn relu(&mut self, x: ValId) -> Result<ValId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Relu { x }, Tensor::new(out, shape)?))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: ValId) -> Result<ValId> {
        let s = self.value(x).sum();
        Ok(self.push(Op::Sum { x }, Tensor::scalar(s)))
    }

    /// Mean of the first `count` entries of a rank-1 value; used to take a
    /// loss over the private prefix of a mixed private/public batch.
    pub fn mean_prefix(&mut self, x: ValId, count: usize) -> Result<ValId> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::shape(format!("mean_prefix input must be rank 1, got {s:?}")));
        }
        if count == 0 || count > s[0] {
            return Err(Error::arg(format!(
                "mean_prefix count {count} out of range for length {}",
                s[0]
            )));
        }
        let m = self.value(x).data()[..count].iter().sum::<f64>() / count as f64;
        Ok(self.push(Op::MeanPrefix { x, count }, Tensor::scalar(m)))
    }

    /// Mean of all entries of a rank-1 value.
    pub fn mean(&mut self, x: ValId) -> Result<ValId> {
        let len = self
            .shape(x)
            .first()
            .copied()
            .ok_or_else(|| Error::shape("mean of empty shape"))?;
        self.mean_prefix(x, len)
    }

    pub fn reshape(&mut self, x: ValId, shape: &[usize]) -> Result<ValId> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, t))
    }

    /// Flattens `[b, ...]` to `[b, rest]`.
    pub fn flatten(&mut self, x: ValId) -> Result<ValId> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape("flatten of empty shape"));
        }
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    pub fn layer_norm(&mut self, x: ValId, gamma: ValId, beta: ValId, eps: f64) -> Result<ValId> {
        let (b, n) = self.norm_check(x, gamma, beta, eps, "layer_norm")?;
        let out = norm::layer_norm_forward(self.value(x).data(), b, n, self.value(gamma).data(), self.value(beta).data(), eps);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, Tensor::new(out, vec![b, n])?))
    }

    pub fn batch_norm(&mut self, x: ValId, gamma: ValId, beta: ValId, eps: f64) -> Result<ValId> {
        let (b, n) = self.norm_check(x, gamma, beta, eps, "batch_norm")?;
        let out = norm::batch_norm_forward(self.value(x).data(), b, n, self.value(gamma).data(), self.value(beta).data(), eps);
        Ok(self.push(Op::BatchNorm { x, gamma, beta, eps }, Tensor::new(out, vec![b, n])?))
    }

    fn norm_check(&self, x: ValId, gamma: ValId, beta: ValId, eps: f64, name: &str) -> Result<(usize, usize)> {
        let (b, n) = self.dims2(x, name)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(format!(
                "{name} scale/shift shapes {:?}/{:?} for width {n}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::arg(format!("{name} eps must be positive, got {eps}")));
        }
        Ok((b, n))
    }

    /// Per-row softmax cross-entropy losses from `[b,n]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: ValId, labels: &[usize]) -> Result<ValId> {
        let (b, n) = self.dims2(logits, "softmax_cross_entropy logits")?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::arg(format!("label {bad} out of range for {n} classes")));
        }
        let z = self.value(logits).data();
        let mut losses = vec![0.0; b];
        for i in 0..b {
            let row = &z[i * n..(i + 1) * n];
            losses[i] = log_sum_exp(row) - row[labels[i]];
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            Tensor::new(losses, vec![b])?,
        ))
    }

    /// Stride-1 convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: ValId, w: ValId, bias: ValId, padding: usize) -> Result<ValId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d wants rank-4 input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d kernel must be square, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d channels: input has {}, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        let dims = ConvDims {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            padding,
        };
        if self.shape(bias) != [dims.out_channels] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} for {} output channels",
                self.shape(bias),
                dims.out_channels
            )));
        }
        if !dims.is_valid() {
            return Err(Error::shape(format!("conv2d kernel does not fit: {dims:?}")));
        }
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(bias).data(), dims);
        let shape = vec![dims.batch, dims.out_channels, dims.out_height(), dims.out_width()];
        Ok(self.push(Op::Conv2d { x, w, bias, dims }, Tensor::new(out, shape)?))
    }

    /// Non-overlapping `size x size` max pooling of a rank-4 value.
    pub fn max_pool2d(&mut self, x: ValId, size: usize) -> Result<ValId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("max_pool2d wants rank 4, got {s:?}")));
        }
        if size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(Error::shape(format!(
                "pool size {size} does not divide {}x{}",
                s[2], s[3]
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let out = conv::max_pool2d_forward(self.value(x).data(), b, c, h, w, size);
        Ok(self.push(Op::MaxPool2d { x, size }, Tensor::new(out, vec![b, c, h / size, w / size])?))
    }

    /// `[b,c,h,w] -> [b*h*w, c]` so that batch statistics run over channels.
    pub fn channels_last(&mut self, x: ValId) -> Result<ValId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("channels_last wants rank 4, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[(((bi * h + hi) * w + wi) * c) + ci] =
                            data[((bi * c + ci) * h + hi) * w + wi];
                    }
                }
            }
        }
        Ok(self.push(Op::ChannelsLast { x }, Tensor::new(out, vec![b * h * w, c])?))
    }

    /// Inverse of [`Tape::channels_last`].
    pub fn channels_first(&mut self, x: ValId, channels: usize, height: usize, width: usize) -> Result<ValId> {
        let (rows, c) = self.dims2(x, "channels_first")?;
        if c != channels || rows % (height * width) != 0 {
            return Err(Error::shape(format!(
                "channels_first: {rows}x{c} does not factor as b*{height}*{width} x {channels}"
            )));
        }
        let b = rows / (height * width);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..channels {
                for hi in 0..height {
                    for wi in 0..width {
                        out[((bi * channels + ci) * height + hi) * width + wi] =
                            data[(((bi * height + hi) * width + wi) * channels) + ci];
                    }
                }
            }
        }
        Ok(self.push(
            Op::ChannelsFirst { x, channels, height, width },
            Tensor::new(out, vec![b, channels, height, width])?,
        ))
    }

    /// Reverse sweep from a scalar output; returns gradients for every node
    /// the output depends on.
    pub fn backward(&self, out: ValId) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        self.backward_seeded(out, Tensor::scalar(1.0))
    }

    /// Reverse sweep with an explicit seed gradient at `out`. Seeding the i-th
    /// unit vector on a vector of per-example losses yields that example's
    /// gradients.
    pub fn backward_seeded(&self, out: ValId, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape(format!(
                "seed shape {:?} vs output shape {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let Some(g) = slots[idx].clone() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let gv = g.data();
                    // da = g @ b^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gv[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    // db = a^T @ g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * gv[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut slots, *a, Tensor::new(da, vec![m, k])?)?;
                    accumulate(&mut slots, *b, Tensor::new(db, vec![k, n])?)?;
                }
                Op::AddBias { x, bias } => {
                    let (b, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gv = g.data();
                    let mut dbias = vec![0.0; n];
                    for i in 0..b {
                        for j in 0..n {
                            dbias[j] += gv[i * n + j];
                        }
                    }
                    accumulate(&mut slots, *x, g.clone())?;
                    accumulate(&mut slots, *bias, Tensor::new(dbias, vec![n])?)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut slots, *a, g.clone())?;
                    accumulate(&mut slots, *b, g.clone())?;
                }
                Op::Sub { a, b } => {
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    accumulate(&mut slots, *a, g.clone())?;
                    accumulate(&mut slots, *b, neg)?;
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g.data().iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut slots, *a, Tensor::new(da, self.shape(*a).to_vec())?)?;
                    accumulate(&mut slots, *b, Tensor::new(db, self.shape(*b).to_vec())?)?;
                }
                Op::Scale { x, factor } => {
                    let mut dx = g.clone();
                    dx.scale_in_place(*factor);
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::AddConst { x } => {
                    accumulate(&mut slots, *x, g.clone())?;
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut slots, *x, Tensor::new(dx, self.shape(*x).to_vec())?)?;
                }
                Op::Sum { x } => {
                    let dx = Tensor::full(self.shape(*x), g.data()[0]);
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::MeanPrefix { x, count } => {
                    let per = g.data()[0] / *count as f64;
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for v in dx.iter_mut().take(*count) {
                        *v = per;
                    }
                    accumulate(&mut slots, *x, Tensor::new(dx, self.shape(*x).to_vec())?)?;
                }
                Op::Reshape { x } => {
                    let dx = g.clone().reshaped(self.shape(*x))?;
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (b, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let (dx, dgamma, dbeta) = norm::layer_norm_backward(
                        self.value(*x).data(),
                        b,
                        n,
                        self.value(*gamma).data(),
                        *eps,
                        g.data(),
                    );
                    accumulate(&mut slots, *x, Tensor::new(dx, vec![b, n])?)?;
                    accumulate(&mut slots, *gamma, Tensor::new(dgamma, vec![n])?)?;
                    accumulate(&mut slots, *beta, Tensor::new(dbeta, vec![n])?)?;
                }
                Op::BatchNorm { x, gamma, beta, eps } => {
                    let (b, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let (dx, dgamma, dbeta) = norm::batch_norm_backward(
                        self.value(*x).data(),
                        b,
                        n,
                        self.value(*gamma).data(),
                        *eps,
                        g.data(),
                    );
                    accumulate(&mut slots, *x, Tensor::new(dx, vec![b, n])?)?;
                    accumulate(&mut slots, *gamma, Tensor::new(dgamma, vec![n])?)?;
                    accumulate(&mut slots, *beta, Tensor::new(dbeta, vec![n])?)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let (b, n) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let z = self.value(*logits).data();
                    let gv = g.data();
                    let mut dz = vec![0.0; b * n];
                    for i in 0..b {
                        if gv[i] == 0.0 {
                            continue;
                        }
                        let row = &z[i * n..(i + 1) * n];
                        let lse = log_sum_exp(row);
                        for j in 0..n {
                            let p = (row[j] - lse).exp();
                            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                            dz[i * n + j] = gv[i] * (p - indicator);
                        }
                    }
                    accumulate(&mut slots, *logits, Tensor::new(dz, vec![b, n])?)?;
                }
                Op::Conv2d { x, w, bias, dims } => {
                    let (dx, dw, dbias) =
                        conv::conv2d_backward(self.value(*x).data(), self.value(*w).data(), *dims, g.data());
                    accumulate(&mut slots, *x, Tensor::new(dx, self.shape(*x).to_vec())?)?;
                    accumulate(&mut slots, *w, Tensor::new(dw, self.shape(*w).to_vec())?)?;
                    accumulate(&mut slots, *bias, Tensor::new(dbias, vec![dims.out_channels])?)?;
                }
                Op::MaxPool2d { x, size } => {
                    let s = self.shape(*x);
                    let dx = conv::max_pool2d_backward(
                        self.value(*x).data(),
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                        *size,
                        g.data(),
                    );
                    accumulate(&mut slots, *x, Tensor::new(dx, s.to_vec())?)?;
                }
                Op::ChannelsLast { x } => {
                    let s = self.shape(*x);
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let gv = g.data();
                    let mut dx = vec![0.0; gv.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    dx[((bi * c + ci) * h + hi) * w + wi] =
                                        gv[(((bi * h + hi) * w + wi) * c) + ci];
                                }
                            }
                        }
                    }
                    accumulate(&mut slots, *x, Tensor::new(dx, s.to_vec())?)?;
                }
                Op::ChannelsFirst { x, channels, height, width } => {
                    let rows = self.shape(*x)[0];
                    let b = rows / (height * width);
                    let gv = g.data();
                    let mut dx = vec![0.0; gv.len()];
                    for bi in 0..b {
                        for ci in 0..*channels {
                            for hi in 0..*height {
                                for wi in 0..*width {
                                    dx[(((bi * height + hi) * width + wi) * channels) + ci] =
                                        gv[((bi * channels + ci) * height + hi) * width + wi];
                                }
                            }
                        }
                    }
                    accumulate(&mut slots, *x, Tensor::new(dx, self.shape(*x).to_vec())?)?;
                }
            }
        }
        Ok(Gradients { slots })
    }

    /// Per-example gradients from a rank-1 vector of per-example losses: one
    /// backward sweep per example, seeded with that example's unit vector.
    /// The mean of the returned gradients equals the gradient of the mean
    /// loss.
    pub fn per_sample_backward(&self, losses: ValId) -> Result<Vec<Gradients>> {
        let s = self.shape(losses);
        if s.len() != 1 {
            return Err(Error::shape(format!(
                "per_sample_backward wants rank-1 losses, got {s:?}"
            )));
        }
        let b = s[0];
        let mut all = Vec::with_capacity(b);
        for i in 0..b {
            let mut seed = vec![0.0; b];
            seed[i] = 1.0;
            all.push(self.backward_seeded(losses, Tensor::new(seed, vec![b])?)?);
        }
        Ok(all)
    }
}

fn accumulate(slots: &mut [Option<Tensor>], id: ValId, delta: Tensor) -> Result<()> {
    match &mut slots[id.0] {
        Some(t) => t.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// `ln(sum(exp(x)))` with the max factored out for stability.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m.is_infinite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
