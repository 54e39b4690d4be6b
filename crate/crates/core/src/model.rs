//! Model definitions: layer stacks, parameter layout, and tape assembly.
//!
//! A [`ModelSpec`] is a declarative layer list; shapes are inferred by walking
//! it, so the same spec drives initialization, forward construction on a
//! [`Tape`], flat parameter packing for the optimizers, and checkpoint
//! round-trips. Normalization is attached to a trainable layer and applied to
//! its pre-activations, between the affine map and the ReLU; the final logits
//! layer never carries normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::norm::NORM_EPS;
use crate::rng::RngStream;
use crate::tape::{Gradients, Tape, ValId};
use crate::tensor::Tensor;

/// Which statistics a normalization layer standardizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Current-batch statistics per feature (or per channel after a conv).
    Batch,
    /// Per-example statistics across features.
    Layer,
}

/// One layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected layer; flattens rank-3 inputs automatically.
    Dense { outputs: usize, norm: Option<NormKind>, relu: bool },
    /// Stride-1 square convolution with zero padding.
    Conv { out_channels: usize, kernel: usize, padding: usize, norm: Option<NormKind>, relu: bool },
    /// Non-overlapping square max pooling.
    MaxPool { size: usize },
}

/// A stack of layers over a fixed per-example input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Shape of one example: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Role of one parameter tensor, used to decide which ones receive noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// Shape and role of one parameter tensor, in flat-layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Index of the layer this tensor belongs to.
    pub layer: usize,
}

impl ModelSpec {
    /// Multilayer perceptron: each hidden layer is dense + optional
    /// normalization + ReLU. When normalization is chosen it also follows the
    /// logits layer, so every trainable layer's output is normalized and the
    /// whole model is invariant to weight rescaling.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, norm: Option<NormKind>) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&h| LayerSpec::Dense { outputs: h, norm, relu: true })
            .collect();
        layers.push(LayerSpec::Dense { outputs: classes, norm, relu: false });
        ModelSpec { input_shape: vec![input_dim], layers }
    }

    /// Small convolutional net for `[1, s, s]` inputs with `s` divisible by 4:
    /// two conv+pool blocks followed by the logits layer. As with [`Self::mlp`],
    /// a chosen normalization follows every trainable layer, the logits
    /// included.
    pub fn small_cnn(side: usize, channels: [usize; 2], classes: usize, norm: Option<NormKind>) -> Self {
        ModelSpec {
            input_shape: vec![1, side, side],
            layers: vec![
                LayerSpec::Conv { out_channels: channels[0], kernel: 3, padding: 1, norm, relu: true },
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { out_channels: channels[1], kernel: 3, padding: 1, norm, relu: true },
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { outputs: classes, norm, relu: false },
            ],
        }
    }

    /// Shape of the activations after each layer, starting from the input.
    /// Errors describe the first layer that does not fit.
    fn shape_walk(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { outputs, .. } => {
                    if *outputs == 0 {
                        return Err(Error::arg(format!("layer {li}: dense with 0 outputs")));
                    }
                    vec![*outputs]
                }
                LayerSpec::Conv { out_channels, kernel, padding, .. } => {
                    if cur.len() != 3 {
                        return Err(Error::shape(format!(
                            "layer {li}: conv needs [c,h,w] input, got {cur:?}"
                        )));
                    }
                    let (h, w) = (cur[1], cur[2]);
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::shape(format!(
                            "layer {li}: kernel {kernel} does not fit {h}x{w} with padding {padding}"
                        )));
                    }
                    vec![*out_channels, h + 2 * padding + 1 - kernel, w + 2 * padding + 1 - kernel]
                }
                LayerSpec::MaxPool { size } => {
                    if cur.len() != 3 {
                        return Err(Error::shape(format!(
                            "layer {li}: pool needs [c,h,w] input, got {cur:?}"
                        )));
                    }
                    if *size == 0 || cur[1] % size != 0 || cur[2] % size != 0 {
                        return Err(Error::shape(format!(
                            "layer {li}: pool size {size} does not divide {}x{}",
                            cur[1], cur[2]
                        )));
                    }
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Checks the layer stack is well formed: shapes chain, the model ends in
    /// a dense logits layer without normalization or ReLU.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("model has no layers"));
        }
        self.shape_walk()?;
        match self.layers.last() {
            Some(LayerSpec::Dense { relu: false, .. }) => Ok(()),
            Some(other) => Err(Error::arg(format!(
                "model must end in a dense logits layer without ReLU, got {other:?}"
            ))),
            None => unreachable!(),
        }
    }

    /// Parameter tensors in layout order.
    pub fn param_infos(&self) -> Result<Vec<ParamInfo>> {
        let shapes = self.shape_walk()?;
        let mut infos = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let in_shape = &shapes[li];
            let out_shape = &shapes[li + 1];
            match layer {
                LayerSpec::Dense { outputs, norm, .. } => {
                    let inputs: usize = in_shape.iter().product();
                    infos.push(ParamInfo { shape: vec![inputs, *outputs], kind: ParamKind::Weight, layer: li });
                    infos.push(ParamInfo { shape: vec![*outputs], kind: ParamKind::Bias, layer: li });
                    if norm.is_some() {
                        infos.push(ParamInfo { shape: vec![*outputs], kind: ParamKind::NormScale, layer: li });
                        infos.push(ParamInfo { shape: vec![*outputs], kind: ParamKind::NormShift, layer: li });
                    }
                }
                LayerSpec::Conv { out_channels, kernel, norm, .. } => {
                    let in_ch = in_shape[0];
                    infos.push(ParamInfo {
                        shape: vec![*out_channels, in_ch, *kernel, *kernel],
                        kind: ParamKind::Weight,
                        layer: li,
                    });
                    infos.push(ParamInfo { shape: vec![*out_channels], kind: ParamKind::Bias, layer: li });
                    if let Some(kind) = norm {
                        // Batch statistics run per channel; per-example
                        // statistics run over the whole feature map.
                        let n = match kind {
                            NormKind::Batch => *out_channels,
                            NormKind::Layer => out_shape.iter().product(),
                        };
                        infos.push(ParamInfo { shape: vec![n], kind: ParamKind::NormScale, layer: li });
                        infos.push(ParamInfo { shape: vec![n], kind: ParamKind::NormShift, layer: li });
                    }
                }
                LayerSpec::MaxPool { .. } => {}
            }
        }
        Ok(infos)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_infos()?
            .iter()
            .map(|i| i.shape.iter().product::<usize>())
            .sum())
    }

    /// Number of output classes (width of the final dense layer).
    pub fn classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) => Ok(*outputs),
            _ => Err(Error::arg("model does not end in a dense layer")),
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                l,
                LayerSpec::Dense { norm: Some(NormKind::Batch), .. }
                    | LayerSpec::Conv { norm: Some(NormKind::Batch), .. }
            )
        })
    }

    pub fn has_norm(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                l,
                LayerSpec::Dense { norm: Some(_), .. } | LayerSpec::Conv { norm: Some(_), .. }
            )
        })
    }

    /// Short human-readable architecture string for logs and reports.
    pub fn describe(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let _ = write!(s, "in{:?}", self.input_shape);
        for l in &self.layers {
            match l {
                LayerSpec::Dense { outputs, norm, relu } => {
                    let _ = write!(s, "-d{outputs}{}{}", norm_tag(norm), if *relu { "r" } else { "" });
                }
                LayerSpec::Conv { out_channels, kernel, norm, relu, .. } => {
                    let _ = write!(s, "-c{out_channels}x{kernel}{}{}", norm_tag(norm), if *relu { "r" } else { "" });
                }
                LayerSpec::MaxPool { size } => {
                    let _ = write!(s, "-p{size}");
                }
            }
        }
        s
    }
}

fn norm_tag(norm: &Option<NormKind>) -> &'static str {
    match norm {
        Some(NormKind::Batch) => "bn",
        Some(NormKind::Layer) => "ln",
        None => "",
    }
}

/// Concrete parameter tensors for a [`ModelSpec`], in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// He-style initialization: weights `N(0, gain * sqrt(2/fan_in))`, zero
    /// biases, unit scales, zero shifts. `gain = 1` is the standard choice.
    pub fn init(spec: &ModelSpec, rng: &mut RngStream, gain: f64) -> Result<Self> {
        let infos = spec.param_infos()?;
        let mut tensors = Vec::with_capacity(infos.len());
        for info in &infos {
            let t = match info.kind {
                ParamKind::Weight => {
                    let fan_in: usize = match info.shape.len() {
                        2 => info.shape[0],
                        4 => info.shape[1] * info.shape[2] * info.shape[3],
                        _ => info.shape.iter().product(),
                    };
                    let std = gain * (2.0 / fan_in as f64).sqrt();
                    let mut t = Tensor::zeros(&info.shape);
                    rng.fill_normal(t.data_mut(), 0.0, std);
                    t
                }
                ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(&info.shape),
                ParamKind::NormScale => Tensor::full(&info.shape, 1.0),
            };
            tensors.push(t);
        }
        Ok(ModelParams { tensors })
    }

    /// Packs all tensors into one flat vector in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let total: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut flat = Vec::with_capacity(total);
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Rebuilds tensors from a flat vector laid out by [`ModelParams::flatten`].
    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let infos = spec.param_infos()?;
        let total: usize = infos.iter().map(|i| i.shape.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!(
                "flat parameter vector has {} values, model needs {total}",
                flat.len()
            )));
        }
        let mut tensors = Vec::with_capacity(infos.len());
        let mut offset = 0;
        for info in &infos {
            let n: usize = info.shape.iter().product();
            tensors.push(Tensor::new(flat[offset..offset + n].to_vec(), info.shape.clone())?);
            offset += n;
        }
        Ok(ModelParams { tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Handles produced by building a forward pass on a tape.
pub struct ForwardBuilt {
    pub logits: ValId,
    /// Leaf ids of the parameter tensors, in layout order.
    pub param_ids: Vec<ValId>,
}

/// Records the full forward pass of `spec` on `tape` for a `[B, ...]` input
/// batch; returns the logits node and the parameter leaf ids.
pub fn build_forward(spec: &ModelSpec, params: &ModelParams, tape: &mut Tape, x: Tensor) -> Result<ForwardBuilt> {
    let infos = spec.param_infos()?;
    if infos.len() != params.tensors.len() {
        return Err(Error::shape(format!(
            "model has {} parameter tensors, got {}",
            infos.len(),
            params.tensors.len()
        )));
    }
    let xs = x.shape();
    if xs.len() != spec.input_shape.len() + 1 || xs[1..] != spec.input_shape[..] {
        return Err(Error::shape(format!(
            "input batch shape {:?} does not match per-example shape {:?}",
            xs, spec.input_shape
        )));
    }
    let batch = xs[0];

    let param_ids: Vec<ValId> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut next_param = 0usize;
    let mut take = |n: usize| {
        let ids = &param_ids[next_param..next_param + n];
        next_param += n;
        ids.to_vec()
    };

    let mut cur = tape.leaf(x);
    let mut cur_shape = spec.input_shape.clone();
    for layer in &spec.layers {
        match layer {
            LayerSpec::Dense { outputs, norm, relu } => {
                if cur_shape.len() > 1 {
                    let flat: usize = cur_shape.iter().product();
                    cur = tape.reshape(cur, &[batch, flat])?;
                }
                let ids = take(2 + if norm.is_some() { 2 } else { 0 });
                cur = tape.matmul(cur, ids[0])?;
                cur = tape.add_bias(cur, ids[1])?;
                if let Some(kind) = norm {
                    cur = match kind {
                        NormKind::Layer => tape.layer_norm(cur, ids[2], ids[3], NORM_EPS)?,
                        NormKind::Batch => tape.batch_norm(cur, ids[2], ids[3], NORM_EPS)?,
                    };
                }
                if *relu {
                    cur = tape.relu(cur)?;
                }
                cur_shape = vec![*outputs];
            }
            LayerSpec::Conv { norm, relu, padding, .. } => {
                let ids = take(2 + if norm.is_some() { 2 } else { 0 });
                cur = tape.conv2d(cur, ids[0], ids[1], *padding)?;
                let s = tape.shape(cur).to_vec();
                cur_shape = s[1..].to_vec();
                if let Some(kind) = norm {
                    cur = match kind {
                        NormKind::Batch => {
                            let cl = tape.channels_last(cur)?;
                            let n = tape.batch_norm(cl, ids[2], ids[3], NORM_EPS)?;
                            tape.channels_first(n, cur_shape[0], cur_shape[1], cur_shape[2])?
                        }
                        NormKind::Layer => {
                            let flat = tape.flatten(cur)?;
                            let n = tape.layer_norm(flat, ids[2], ids[3], NORM_EPS)?;
                            tape.reshape(n, &[batch, cur_shape[0], cur_shape[1], cur_shape[2]])?
                        }
                    };
                }
                if *relu {
                    cur = tape.relu(cur)?;
                }
            }
            LayerSpec::MaxPool { size } => {
                cur = tape.max_pool2d(cur, *size)?;
                let s = tape.shape(cur).to_vec();
                cur_shape = s[1..].to_vec();
            }
        }
    }
    Ok(ForwardBuilt { logits: cur, param_ids })
}

/// Forward + cross-entropy; `private_count` limits the loss to the first rows
/// of the batch (used when public rows are appended for batch statistics).
pub struct LossBuilt {
    pub mean_loss: ValId,
    pub losses: ValId,
    pub logits: ValId,
    pub param_ids: Vec<ValId>,
}

pub fn build_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    tape: &mut Tape,
    x: Tensor,
    labels: &[usize],
    private_count: Option<usize>,
) -> Result<LossBuilt> {
    let fwd = build_forward(spec, params, tape, x)?;
    let losses = tape.softmax_cross_entropy(fwd.logits, labels)?;
    let mean_loss = match private_count {
        Some(count) => tape.mean_prefix(losses, count)?,
        None => tape.mean(losses)?,
    };
    Ok(LossBuilt { mean_loss, losses, logits: fwd.logits, param_ids: fwd.param_ids })
}

/// Mean loss and flat gradient over a labelled batch.
pub fn batch_grad(
    spec: &ModelSpec,
    params: &ModelParams,
    x: Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let built = build_loss(spec, params, &mut tape, x, labels, None)?;
    let loss = tape.value(built.mean_loss).data()[0];
    let grads = tape.backward(built.mean_loss)?;
    Ok((loss, flatten_param_grads(&tape, &grads, &built.param_ids)))
}

/// Per-example losses and flat per-example gradients.
pub struct PerSampleGrads {
    /// One flat gradient per example, each of length `param_count`.
    pub grads: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

/// Per-example gradients of the cross-entropy loss.
///
/// Models without batch statistics get them from one batched tape (each
/// example's loss is seeded separately, which is exact because rows do not
/// interact). Models with batch statistics instead rebuild, per example, a
/// microbatch of that example followed by the fixed public rows, taking the
/// loss over the example row only; public rows supply the statistics.
pub fn per_sample_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    public_rows: Option<&Tensor>,
) -> Result<PerSampleGrads> {
    let b = x.shape().first().copied().unwrap_or(0);
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if b == 0 {
        return Ok(PerSampleGrads { grads: Vec::new(), losses: Vec::new() });
    }

    if spec.has_batch_norm() {
        let public = public_rows.ok_or_else(|| {
            Error::arg("batch-normalized model needs public rows for per-example gradients")
        })?;
        let mut grads = Vec::with_capacity(b);
        let mut losses = Vec::with_capacity(b);
        for i in 0..b {
            let mixed = concat_example_and_public(x, i, public, &spec.input_shape)?;
            // Public labels never enter the loss; any in-range value works.
            let mut mixed_labels = vec![0usize; mixed.shape()[0]];
            mixed_labels[0] = labels[i];
            let mut tape = Tape::new();
            let built = build_loss(spec, params, &mut tape, mixed, &mixed_labels, Some(1))?;
            losses.push(tape.value(built.mean_loss).data()[0]);
            let g = tape.backward(built.mean_loss)?;
            grads.push(flatten_param_grads(&tape, &g, &built.param_ids));
        }
        Ok(PerSampleGrads { grads, losses })
    } else {
        let mut tape = Tape::new();
        let built = build_loss(spec, params, &mut tape, x.clone(), labels, None)?;
        let losses = tape.value(built.losses).data().to_vec();
        let per = tape.per_sample_backward(built.losses)?;
        let grads = per
            .iter()
            .map(|g| flatten_param_grads(&tape, g, &built.param_ids))
            .collect();
        Ok(PerSampleGrads { grads, losses })
    }
}

/// Builds `[1 + M, ...example]` from example `i` of `x` followed by the
/// public rows.
fn concat_example_and_public(
    x: &Tensor,
    i: usize,
    public: &Tensor,
    example_shape: &[usize],
) -> Result<Tensor> {
    let n: usize = example_shape.iter().product();
    if public.shape().len() != example_shape.len() + 1 || public.shape()[1..] != *example_shape {
        return Err(Error::shape(format!(
            "public rows shape {:?} does not match example shape {example_shape:?}",
            public.shape()
        )));
    }
    let m = public.shape()[0];
    let mut data = Vec::with_capacity((1 + m) * n);
    data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
    data.extend_from_slice(public.data());
    let mut shape = vec![1 + m];
    shape.extend_from_slice(example_shape);
    Tensor::new(data, shape)
}

/// Packs parameter gradients into one flat vector in layout order; missing
/// gradients become zeros.
pub fn flatten_param_grads(tape: &Tape, grads: &Gradients, param_ids: &[ValId]) -> Vec<f64> {
    let total: usize = param_ids.iter().map(|&id| tape.value(id).len()).sum();
    let mut flat = Vec::with_capacity(total);
    for &id in param_ids {
        match grads.wrt(id) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(core::iter::repeat(0.0).take(tape.value(id).len())),
        }
    }
    flat
}

/// Class predictions for a batch; models with batch statistics are rejected
/// here because their predictions depend on the evaluation batch (use
/// [`predict_with_public`] instead).
pub fn predict_batch(spec: &ModelSpec, params: &ModelParams, x: Tensor) -> Result<Vec<usize>> {
    if spec.has_batch_norm() {
        return Err(Error::arg(
            "batch-normalized model predictions need public rows; use predict_with_public",
        ));
    }
    let mut tape = Tape::new();
    let fwd = build_forward(spec, params, &mut tape, x)?;
    Ok(argmax_rows(tape.value(fwd.logits)))
}

/// Per-example predictions for a batch-normalized model: each example is
/// evaluated in a microbatch with the fixed public rows supplying statistics,
/// and only the example's own logits row is read.
pub fn predict_with_public(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    public_rows: &Tensor,
) -> Result<Vec<usize>> {
    let b = x.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mixed = concat_example_and_public(x, i, public_rows, &spec.input_shape)?;
        let mut tape = Tape::new();
        let fwd = build_forward(spec, params, &mut tape, mixed)?;
        let logits = tape.value(fwd.logits);
        let n = logits.shape()[1];
        out.push(argmax(&logits.data()[..n]));
    }
    Ok(out)
}

/// Fraction of correct predictions, evaluated in chunks to bound memory.
/// Batch-normalized models require `public_rows`.
pub fn accuracy(
    spec: &ModelSpec,
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    public_rows: Option<&Tensor>,
    chunk: usize,
) -> Result<f64> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::arg("accuracy over an empty set"));
    }
    let example_len: usize = spec.input_shape.iter().product();
    let mut correct = 0usize;
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows = end - start;
        let mut shape = vec![rows];
        shape.extend_from_slice(&spec.input_shape);
        let slice = Tensor::new(
            images.data()[start * example_len..end * example_len].to_vec(),
            shape,
        )?;
        let preds = if spec.has_batch_norm() {
            let public = public_rows.ok_or_else(|| {
                Error::arg("batch-normalized model needs public rows for evaluation")
            })?;
            predict_with_public(spec, params, &slice, public)?
        } else {
            predict_batch(spec, params, slice)?
        };
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0]).map(|i| argmax(logits.row(i))).collect()
}

/// Largest absolute change in any logit when the weights and biases of the
/// checked layers are jointly scaled by `lambda`.
///
/// Layers carrying normalization are scaled (their scale/shift parameters are
/// left alone); if the model has no normalization at all, every trainable
/// layer except the final logits layer is scaled instead, so normalized and
/// plain architectures can be compared under the same transformation.
pub fn scale_invariance_check(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    lambda: f64,
) -> Result<f64> {
    if !(lambda.is_finite()) || lambda == 0.0 {
        return Err(Error::arg(format!("scale factor must be finite and nonzero, got {lambda}")));
    }
    let infos = spec.param_infos()?;
    let normalized_layers: Vec<usize> = spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(li, l)| match l {
            LayerSpec::Dense { norm: Some(_), .. } | LayerSpec::Conv { norm: Some(_), .. } => Some(li),
            _ => None,
        })
        .collect();
    let scaled_layers: Vec<usize> = if normalized_layers.is_empty() {
        let last_trainable = spec
            .layers
            .iter()
            .rposition(|l| !matches!(l, LayerSpec::MaxPool { .. }))
            .unwrap_or(0);
        spec.layers
            .iter()
            .enumerate()
            .filter_map(|(li, l)| {
                (!matches!(l, LayerSpec::MaxPool { .. }) && li != last_trainable).then_some(li)
            })
            .collect()
    } else {
        normalized_layers
    };

    let mut scaled = params.clone();
    for (info, tensor) in infos.iter().zip(scaled.tensors.iter_mut()) {
        if scaled_layers.contains(&info.layer)
            && matches!(info.kind, ParamKind::Weight | ParamKind::Bias)
        {
            tensor.scale_in_place(lambda);
        }
    }

    let mut tape_a = Tape::new();
    let base = build_forward(spec, params, &mut tape_a, x.clone())?;
    let mut tape_b = Tape::new();
    let after = build_forward(spec, &scaled, &mut tape_b, x.clone())?;

    let a = tape_a.value(base.logits).data();
    let b = tape_b.value(after.logits).data();
    Ok(a.iter()
        .zip(b)
        .fold(0.0, |m: f64, (x, y)| m.max((x - y).abs())))
}
