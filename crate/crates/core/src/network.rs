//! Feed-forward network definition, forward evaluation, and reverse-mode
//! gradients of the batch-mean empirical loss.
//!
//! Layers compose over shapes without a batch axis; all entry points take
//! batched tensors whose leading extent is the batch. Convolutions run as
//! im2col + matmul per sample. Gradients are exact reverse-mode; the max-pool
//! subgradient routes to the first maximal index in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, conv_out_extent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            // max(x,0) + ln(1+e^{-|x|}), stable for large |x|
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 - (-y).exp(),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default = "default_true")]
        penalize: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default = "default_true")]
        penalize: bool,
    },
    Activation { function: Activation },
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    ResidualBlock { layers: Vec<LayerSpec> },
}

fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> LayerSpec {
        LayerSpec::Dense { inputs, outputs, bias: false, penalize: true }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
            bias: false,
            penalize: true,
        }
    }

    pub fn activation(function: Activation) -> LayerSpec {
        LayerSpec::Activation { function }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Shape of the layer output given an unbatched input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [*inputs] {
                    return Err(Error::Dimension(format!(
                        "dense layer expects input [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let (c, h, w) = expect_chw(input)?;
                if c != *in_channels {
                    return Err(Error::Dimension(format!(
                        "conv layer expects {in_channels} channels, got {c}"
                    )));
                }
                let oh = conv_out_extent(h, *kernel, *stride, *padding)?;
                let ow = conv_out_extent(w, *kernel, *stride, *padding)?;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                let (c, h, w) = expect_chw(input)?;
                let oh = conv_out_extent(h, *size, *stride, 0)?;
                let ow = conv_out_extent(w, *size, *stride, 0)?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::ResidualBlock { layers } => {
                let mut shape = input.to_vec();
                for l in layers {
                    shape = l.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(Error::Dimension(format!(
                        "residual block maps {input:?} to {shape:?}; shapes must match"
                    )));
                }
                Ok(shape)
            }
        }
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![*outputs, *inputs]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![*out_channels, *in_channels, *kernel, *kernel])
            }
            _ => None,
        }
    }

    fn bias_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Dense { outputs, bias: true, .. } => Some(vec![*outputs]),
            LayerSpec::Conv2d { out_channels, bias: true, .. } => Some(vec![*out_channels]),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

fn expect_chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Dimension(format!("expected c×h×w input, got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
    /// Input shape of a single sample.
    pub input_shape: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, loss: Loss) -> NetworkSpec {
        NetworkSpec { layers, loss, input_shape }
    }

    /// Checks that consecutive layer shapes compose and returns the output
    /// shape of a single sample.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
        }
        Ok(shape)
    }

    /// Paths of parameterized layers in depth-first order. A path is the
    /// index chain from the top-level layer list into residual blocks.
    pub fn param_paths(&self) -> Vec<LayerPath> {
        let mut out = Vec::new();
        fn walk(layers: &[LayerSpec], prefix: &[usize], out: &mut Vec<LayerPath>) {
            for (i, l) in layers.iter().enumerate() {
                let mut path = prefix.to_vec();
                path.push(i);
                match l {
                    LayerSpec::ResidualBlock { layers } => walk(layers, &path, out),
                    _ if l.has_params() => out.push(LayerPath(path)),
                    _ => {}
                }
            }
        }
        walk(&self.layers, &[], &mut out);
        out
    }

    pub fn layer_at(&self, path: &LayerPath) -> Result<&LayerSpec> {
        let mut layers = &self.layers;
        let mut current: Option<&LayerSpec> = None;
        for &i in &path.0 {
            let l = layers
                .get(i)
                .ok_or_else(|| Error::NotFound(format!("no layer at path {path}")))?;
            current = Some(l);
            if let LayerSpec::ResidualBlock { layers: inner } = l {
                layers = inner;
            }
        }
        current.ok_or_else(|| Error::NotFound(format!("empty layer path {path}")))
    }

    pub fn layer_at_mut(&mut self, path: &LayerPath) -> Result<&mut LayerSpec> {
        let mut layers = &mut self.layers;
        let (last, prefix) = path
            .0
            .split_last()
            .ok_or_else(|| Error::NotFound("empty layer path".into()))?;
        for &i in prefix {
            match layers.get_mut(i) {
                Some(LayerSpec::ResidualBlock { layers: inner }) => layers = inner,
                _ => return Err(Error::NotFound(format!("no block at path {path}"))),
            }
        }
        layers
            .get_mut(*last)
            .ok_or_else(|| Error::NotFound(format!("no layer at path {path}")))
    }
}

/// Index chain addressing a layer, possibly inside residual blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerPath(pub Vec<usize>);

impl std::fmt::Display for LayerPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Weight (and optional bias) for one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub path: LayerPath,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Parameters for every parameterized layer, in depth-first order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    /// He-initialized parameters (variance 2/fan-in), biases zero.
    pub fn init(net: &NetworkSpec, rng: &mut crate::rng::SeededRng) -> Result<ParamSet> {
        net.validate()?;
        let mut entries = Vec::new();
        for path in net.param_paths() {
            let layer = net.layer_at(&path)?;
            let wshape = layer.weight_shape().expect("param path addresses a weight layer");
            let weight = rng.he_tensor(&wshape, layer.fan_in());
            let bias = layer.bias_shape().map(|s| Tensor::zeros(&s));
            entries.push(ParamEntry { path, weight, bias });
        }
        Ok(ParamSet { entries })
    }

    /// Zero tensors in the same shapes; the accumulator for gradients.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    path: e.path.clone(),
                    weight: Tensor::zeros(e.weight.shape()),
                    bias: e.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
                })
                .collect(),
        }
    }

    pub fn entry(&self, path: &LayerPath) -> Result<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| &e.path == path)
            .ok_or_else(|| Error::NotFound(format!("no parameters for {path}")))
    }

    pub fn entry_mut(&mut self, path: &LayerPath) -> Result<&mut ParamEntry> {
        self.entries
            .iter_mut()
            .find(|e| &e.path == path)
            .ok_or_else(|| Error::NotFound(format!("no parameters for {path}")))
    }

    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.weight.len() + e.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.weight.is_finite() && e.bias.as_ref().map_or(true, Tensor::is_finite))
    }
}

/// Multiplies each parameterized layer's weights by a per-layer factor.
/// Factors follow the depth-first parameter order; all must be positive.
pub fn scale_layers(params: &ParamSet, factors: &[f64]) -> Result<ParamSet> {
    if factors.len() != params.entries.len() {
        return Err(Error::Argument(format!(
            "{} factors for {} parameterized layers",
            factors.len(),
            params.entries.len()
        )));
    }
    if let Some(bad) = factors.iter().find(|f| **f <= 0.0 || !f.is_finite()) {
        return Err(Error::Argument(format!("layer factors must be positive, got {bad}")));
    }
    let entries = params
        .entries
        .iter()
        .zip(factors)
        .map(|(e, &f)| ParamEntry {
            path: e.path.clone(),
            weight: e.weight.scale(f),
            bias: e.bias.clone(),
        })
        .collect();
    Ok(ParamSet { entries })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum TraceAux {
    None,
    MaxPool { argmax: Vec<usize> },
    Residual { inner: Box<Trace> },
}

#[derive(Debug, Clone)]
struct TraceStep {
    output: Tensor,
    aux: TraceAux,
}

/// Retained activations of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: Tensor,
    steps: Vec<TraceStep>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.steps.last().map(|s| &s.output).unwrap_or(&self.input)
    }
}

fn batch_of(x: &Tensor) -> Result<(usize, Vec<usize>)> {
    match x.shape() {
        [] => Err(Error::Dimension("input must have a batch axis".into())),
        [b, rest @ ..] => Ok((*b, rest.to_vec())),
    }
}

struct Cursor<'a> {
    entries: &'a [ParamEntry],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> Result<&'a ParamEntry> {
        let e = self
            .entries
            .get(self.next)
            .ok_or_else(|| Error::Dimension("parameter set shorter than network".into()))?;
        self.next += 1;
        Ok(e)
    }
}

/// Runs the network over a batch `x` of shape `[batch, input...]`, retaining
/// per-layer activations for the backward pass.
pub fn forward(net: &NetworkSpec, params: &ParamSet, x: &Tensor) -> Result<Trace> {
    let (batch, sample_shape) = batch_of(x)?;
    if sample_shape != net.input_shape {
        return Err(Error::Dimension(format!(
            "input sample shape {:?} does not match network input {:?}",
            sample_shape, net.input_shape
        )));
    }
    let mut cursor = Cursor { entries: &params.entries, next: 0 };
    let trace = forward_layers(&net.layers, &mut cursor, x, batch)?;
    if cursor.next != params.entries.len() {
        return Err(Error::Dimension("parameter set longer than network".into()));
    }
    Ok(trace)
}

fn forward_layers(
    layers: &[LayerSpec],
    cursor: &mut Cursor,
    input: &Tensor,
    batch: usize,
) -> Result<Trace> {
    let mut steps = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        let step = forward_layer(layer, cursor, &current, batch)?;
        if !step.output.is_finite() {
            return Err(Error::Numeric("non-finite activation in forward pass".into()));
        }
        current = step.output.clone();
        steps.push(step);
    }
    Ok(Trace { input: input.clone(), steps })
}

fn forward_layer(
    layer: &LayerSpec,
    cursor: &mut Cursor,
    input: &Tensor,
    batch: usize,
) -> Result<TraceStep> {
    match layer {
        LayerSpec::Dense { inputs, outputs, .. } => {
            let entry = cursor.take()?;
            let x = input.reshape(&[batch, *inputs]).map_err(|_| {
                Error::Dimension(format!(
                    "dense layer expects [batch, {inputs}], got {:?}",
                    input.shape()
                ))
            })?;
            let mut y = tensor::matmul_nt(&x, &entry.weight)?;
            if let Some(bias) = &entry.bias {
                let bd = bias.data();
                for row in y.data_mut().chunks_exact_mut(*outputs) {
                    for (v, b) in row.iter_mut().zip(bd) {
                        *v += b;
                    }
                }
            }
            Ok(TraceStep { output: y, aux: TraceAux::None })
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
            let entry = cursor.take()?;
            let (c, h, w) = expect_chw(&input.shape()[1..])?;
            if c != *in_channels {
                return Err(Error::Dimension(format!(
                    "conv expects {in_channels} channels, got {c}"
                )));
            }
            let oh = conv_out_extent(h, *kernel, *stride, *padding)?;
            let ow = conv_out_extent(w, *kernel, *stride, *padding)?;
            let patch = c * kernel * kernel;
            let ker_m = entry.weight.reshape(&[*out_channels, patch])?;
            let mut out = Tensor::zeros(&[batch, *out_channels, oh, ow]);
            let plane = oh * ow;
            let mut col = vec![0.0; plane * patch];
            let in_sample = c * h * w;
            let out_sample = *out_channels * plane;
            for b in 0..batch {
                let sample = &input.data()[b * in_sample..(b + 1) * in_sample];
                tensor::im2col(sample, c, h, w, *kernel, *kernel, *stride, *padding, oh, ow, &mut col);
                let col_t = Tensor::from_data(&[plane, patch], col.clone())?;
                let y = tensor::matmul_nt(&ker_m, &col_t)?;
                let dst = &mut out.data_mut()[b * out_sample..(b + 1) * out_sample];
                dst.copy_from_slice(y.data());
                if let Some(bias) = &entry.bias {
                    for (co, &bv) in bias.data().iter().enumerate() {
                        for v in dst[co * plane..(co + 1) * plane].iter_mut() {
                            *v += bv;
                        }
                    }
                }
            }
            Ok(TraceStep { output: out, aux: TraceAux::None })
        }
        LayerSpec::Activation { function } => {
            let output = input.map(|v| function.apply(v));
            Ok(TraceStep { output, aux: TraceAux::None })
        }
        LayerSpec::MaxPool { size, stride } => {
            let (c, h, w) = expect_chw(&input.shape()[1..])?;
            let oh = conv_out_extent(h, *size, *stride, 0)?;
            let ow = conv_out_extent(w, *size, *stride, 0)?;
            let mut out = Tensor::zeros(&[batch, c, oh, ow]);
            let mut argmax = vec![0usize; batch * c * oh * ow];
            let od = out.data_mut();
            let id = input.data();
            let mut oi = 0;
            for b in 0..batch {
                for ci in 0..c {
                    let plane = &id[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for ki in 0..*size {
                                for kj in 0..*size {
                                    let ih = ohi * stride + ki;
                                    let iw = owi * stride + kj;
                                    let v = plane[ih * w + iw];
                                    // strict inequality keeps the first
                                    // row-major maximum on ties
                                    if v > best {
                                        best = v;
                                        best_idx = (b * c + ci) * h * w + ih * w + iw;
                                    }
                                }
                            }
                            od[oi] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
            Ok(TraceStep { output: out, aux: TraceAux::MaxPool { argmax } })
        }
        LayerSpec::AvgPool { size, stride } => {
            let (c, h, w) = expect_chw(&input.shape()[1..])?;
            let oh = conv_out_extent(h, *size, *stride, 0)?;
            let ow = conv_out_extent(w, *size, *stride, 0)?;
            let mut out = Tensor::zeros(&[batch, c, oh, ow]);
            let inv = 1.0 / (size * size) as f64;
            let od = out.data_mut();
            let id = input.data();
            let mut oi = 0;
            for b in 0..batch {
                for ci in 0..c {
                    let plane = &id[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = 0.0;
                            for ki in 0..*size {
                                let row = (ohi * stride + ki) * w + owi * stride;
                                for v in &plane[row..row + size] {
                                    acc += v;
                                }
                            }
                            od[oi] = acc * inv;
                            oi += 1;
                        }
                    }
                }
            }
            Ok(TraceStep { output: out, aux: TraceAux::None })
        }
        LayerSpec::Flatten => {
            let flat: usize = input.shape()[1..].iter().product();
            let output = input.reshape(&[batch, flat])?;
            Ok(TraceStep { output, aux: TraceAux::None })
        }
        LayerSpec::ResidualBlock { layers } => {
            let inner = forward_layers(layers, cursor, input, batch)?;
            let output = input.add(inner.output()).map_err(|_| {
                Error::Dimension("residual block output shape differs from its input".into())
            })?;
            Ok(TraceStep { output, aux: TraceAux::Residual { inner: Box::new(inner) } })
        }
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Batch-mean loss of network outputs against labels.
///
/// For [`Loss::Mse`] the per-sample term is `½‖p − y‖²` with `y` shaped like
/// the output. For [`Loss::SoftmaxCrossEntropy`] labels are a `[batch]`
/// vector of class indices.
pub fn loss_value(loss: Loss, output: &Tensor, y: &Tensor) -> Result<f64> {
    let (batch, rest) = batch_of(output)?;
    let dim: usize = rest.iter().product();
    match loss {
        Loss::Mse => {
            if y.shape() != output.shape() {
                return Err(Error::Dimension(format!(
                    "mse labels {:?} do not match output {:?}",
                    y.shape(),
                    output.shape()
                )));
            }
            let mut total = 0.0;
            for (p, t) in output.data().iter().zip(y.data()) {
                let d = p - t;
                total += 0.5 * d * d;
            }
            Ok(total / batch.max(1) as f64)
        }
        Loss::SoftmaxCrossEntropy => {
            let labels = class_labels(y, batch, dim)?;
            let mut total = 0.0;
            for (b, &label) in labels.iter().enumerate() {
                let row = &output.data()[b * dim..(b + 1) * dim];
                total -= log_softmax_at(row, label);
            }
            let v = total / batch.max(1) as f64;
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite loss".into()));
            }
            Ok(v)
        }
    }
}

fn class_labels(y: &Tensor, batch: usize, classes: usize) -> Result<Vec<usize>> {
    if y.shape() != [batch] {
        return Err(Error::Dimension(format!(
            "cross-entropy labels must be a [batch] class vector, got {:?}",
            y.shape()
        )));
    }
    y.data()
        .iter()
        .map(|&v| {
            let c = v as usize;
            if v.fract() != 0.0 || v < 0.0 || c >= classes {
                Err(Error::Argument(format!("label {v} outside 0..{classes}")))
            } else {
                Ok(c)
            }
        })
        .collect()
}

fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[label] - lse
}

fn loss_grad(loss: Loss, output: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (batch, rest) = batch_of(output)?;
    let dim: usize = rest.iter().product();
    let inv = 1.0 / batch.max(1) as f64;
    match loss {
        Loss::Mse => {
            let mut g = output.sub(y)?;
            for v in g.data_mut() {
                *v *= inv;
            }
            Ok(g)
        }
        Loss::SoftmaxCrossEntropy => {
            let labels = class_labels(y, batch, dim)?;
            let mut g = Tensor::zeros(output.shape());
            for (b, &label) in labels.iter().enumerate() {
                let row = &output.data()[b * dim..(b + 1) * dim];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let grow = &mut g.data_mut()[b * dim..(b + 1) * dim];
                for (i, e) in exps.iter().enumerate() {
                    grow[i] = (e / sum) * inv;
                }
                grow[label] -= inv;
            }
            Ok(g)
        }
    }
}

/// Forward pass plus batch-mean loss.
pub fn evaluate(net: &NetworkSpec, params: &ParamSet, x: &Tensor, y: &Tensor) -> Result<(Trace, f64)> {
    let trace = forward(net, params, x)?;
    let loss = loss_value(net.loss, trace.output(), y)?;
    Ok((trace, loss))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Exact reverse-mode gradient of the batch-mean loss with respect to every
/// parameter, given the trace of the matching forward pass.
pub fn backward(net: &NetworkSpec, params: &ParamSet, trace: &Trace, y: &Tensor) -> Result<ParamSet> {
    let mut grads = params.zeros_like();
    let d_out = loss_grad(net.loss, trace.output(), y)?;
    let mut cursor_end = params.entries.len();
    backward_layers(&net.layers, params, &mut cursor_end, trace, &d_out, &mut grads)?;
    if cursor_end != 0 {
        return Err(Error::Dimension("parameter set longer than network".into()));
    }
    Ok(grads)
}

/// Walks layers in reverse; `cursor_end` points one past the last unconsumed
/// parameter entry.
fn backward_layers(
    layers: &[LayerSpec],
    params: &ParamSet,
    cursor_end: &mut usize,
    trace: &Trace,
    d_out: &Tensor,
    grads: &mut ParamSet,
) -> Result<Tensor> {
    let mut grad = d_out.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = if i == 0 { &trace.input } else { &trace.steps[i - 1].output };
        let step = &trace.steps[i];
        grad = backward_layer(layer, params, cursor_end, input, step, &grad, grads)?;
    }
    Ok(grad)
}

fn backward_layer(
    layer: &LayerSpec,
    params: &ParamSet,
    cursor_end: &mut usize,
    input: &Tensor,
    step: &TraceStep,
    d_out: &Tensor,
    grads: &mut ParamSet,
) -> Result<Tensor> {
    let batch = input.shape()[0];
    match layer {
        LayerSpec::Dense { inputs, .. } => {
            *cursor_end -= 1;
            let idx = *cursor_end;
            let weight = &params.entries[idx].weight;
            let x = input.reshape(&[batch, *inputs])?;
            // dW = dYᵀ·X, dX = dY·W
            let dw = tensor::matmul_tn(d_out, &x)?;
            grads.entries[idx].weight.axpy(1.0, &dw)?;
            if let Some(db) = &mut grads.entries[idx].bias {
                let cols = db.len();
                for row in d_out.data().chunks_exact(cols) {
                    for (b, v) in db.data_mut().iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
            let dx = tensor::matmul(d_out, weight)?;
            dx.reshape(input.shape())
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
            *cursor_end -= 1;
            let idx = *cursor_end;
            let (c, h, w) = expect_chw(&input.shape()[1..])?;
            let oh = conv_out_extent(h, *kernel, *stride, *padding)?;
            let ow = conv_out_extent(w, *kernel, *stride, *padding)?;
            let plane = oh * ow;
            let patch = in_channels * kernel * kernel;
            let ker_m = params.entries[idx].weight.reshape(&[*out_channels, patch])?;
            let mut dker = Tensor::zeros(&[*out_channels, patch]);
            let mut dinput = Tensor::zeros(input.shape());
            let in_sample = c * h * w;
            let out_sample = *out_channels * plane;
            let mut col = vec![0.0; plane * patch];
            for b in 0..batch {
                let sample = &input.data()[b * in_sample..(b + 1) * in_sample];
                tensor::im2col(sample, c, h, w, *kernel, *kernel, *stride, *padding, oh, ow, &mut col);
                let col_t = Tensor::from_data(&[plane, patch], col.clone())?;
                let d_m = Tensor::from_data(
                    &[*out_channels, plane],
                    d_out.data()[b * out_sample..(b + 1) * out_sample].to_vec(),
                )?;
                // dK += dY·col, dCol = dYᵀ·K
                dker.axpy(1.0, &tensor::matmul(&d_m, &col_t)?)?;
                let dcol = tensor::matmul_tn(&d_m, &ker_m)?;
                tensor::col2im(
                    dcol.data(),
                    c,
                    h,
                    w,
                    *kernel,
                    *kernel,
                    *stride,
                    *padding,
                    oh,
                    ow,
                    &mut dinput.data_mut()[b * in_sample..(b + 1) * in_sample],
                );
                if let Some(db) = &mut grads.entries[idx].bias {
                    for (co, bv) in db.data_mut().iter_mut().enumerate() {
                        let src = &d_out.data()[b * out_sample + co * plane..b * out_sample + (co + 1) * plane];
                        *bv += src.iter().sum::<f64>();
                    }
                }
            }
            let wshape = grads.entries[idx].weight.shape().to_vec();
            grads.entries[idx].weight.axpy(1.0, &dker.reshape(&wshape)?)?;
            Ok(dinput)
        }
        LayerSpec::Activation { function } => {
            let mut g = d_out.clone();
            for (gv, &yv) in g.data_mut().iter_mut().zip(step.output.data()) {
                *gv *= function.derivative_from_output(yv);
            }
            Ok(g)
        }
        LayerSpec::MaxPool { .. } => {
            let TraceAux::MaxPool { argmax } = &step.aux else {
                return Err(Error::Dimension("max-pool trace missing".into()));
            };
            let mut dinput = Tensor::zeros(input.shape());
            let dd = dinput.data_mut();
            for (&src, &g) in argmax.iter().zip(d_out.data()) {
                dd[src] += g;
            }
            Ok(dinput)
        }
        LayerSpec::AvgPool { size, stride } => {
            let (c, h, w) = expect_chw(&input.shape()[1..])?;
            let oh = conv_out_extent(h, *size, *stride, 0)?;
            let ow = conv_out_extent(w, *size, *stride, 0)?;
            let inv = 1.0 / (size * size) as f64;
            let mut dinput = Tensor::zeros(input.shape());
            let dd = dinput.data_mut();
            let mut oi = 0;
            for b in 0..batch {
                for ci in 0..c {
                    let base = (b * c + ci) * h * w;
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let g = d_out.data()[oi] * inv;
                            oi += 1;
                            for ki in 0..*size {
                                let row = base + (ohi * stride + ki) * w + owi * stride;
                                for v in &mut dd[row..row + size] {
                                    *v += g;
                                }
                            }
                        }
                    }
                }
            }
            Ok(dinput)
        }
        LayerSpec::Flatten => d_out.reshape(input.shape()),
        LayerSpec::ResidualBlock { layers } => {
            let TraceAux::Residual { inner } = &step.aux else {
                return Err(Error::Dimension("residual trace missing".into()));
            };
            let d_inner = backward_layers(layers, params, cursor_end, inner, d_out, grads)?;
            d_out.add(&d_inner)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn single_dense_net(inputs: usize, outputs: usize, loss: Loss) -> NetworkSpec {
        NetworkSpec::new(vec![inputs], vec![LayerSpec::dense(inputs, outputs)], loss)
    }

    #[test]
    fn identity_regression_has_zero_loss() {
        let net = single_dense_net(3, 3, Loss::Mse);
        let params = ParamSet {
            entries: vec![ParamEntry {
                path: LayerPath(vec![0]),
                weight: Tensor::identity(3),
                bias: None,
            }],
        };
        let mut rng = SeededRng::new(1);
        let x = rng.normal_tensor(&[4, 3], 1.0);
        let (_, loss) = evaluate(&net, &params, &x, &x).unwrap();
        assert_eq!(loss, 0.0);
        // zero loss at a smooth interior optimum → zero gradient
        let trace = forward(&net, &params, &x).unwrap();
        let grads = backward(&net, &params, &trace, &x).unwrap();
        assert!(grads.entries[0].weight.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_params_cross_entropy_is_ln_k() {
        let k = 7;
        let net = single_dense_net(5, k, Loss::SoftmaxCrossEntropy);
        let params = ParamSet {
            entries: vec![ParamEntry {
                path: LayerPath(vec![0]),
                weight: Tensor::zeros(&[k, 5]),
                bias: None,
            }],
        };
        let mut rng = SeededRng::new(2);
        let x = rng.normal_tensor(&[6, 5], 1.0);
        let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (_, loss) = evaluate(&net, &params, &x, &y).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn scalar_least_squares_hand_case() {
        // W = 2, x = 3, y = 5: loss ½(6−5)² = 0.5, dLoss/dW = (Wx−y)x = 3
        let net = single_dense_net(1, 1, Loss::Mse);
        let params = ParamSet {
            entries: vec![ParamEntry {
                path: LayerPath(vec![0]),
                weight: Tensor::scalar(2.0).reshape(&[1, 1]).unwrap(),
                bias: None,
            }],
        };
        let x = Tensor::from_data(&[1, 1], vec![3.0]).unwrap();
        let y = Tensor::from_data(&[1, 1], vec![5.0]).unwrap();
        let (trace, loss) = evaluate(&net, &params, &x, &y).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
        let grads = backward(&net, &params, &trace, &y).unwrap();
        assert!((grads.entries[0].weight.data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn batch_mean_linearity() {
        let mut rng = SeededRng::new(3);
        let net = NetworkSpec::new(
            vec![4],
            vec![
                LayerSpec::dense(4, 6),
                LayerSpec::activation(Activation::Tanh),
                LayerSpec::dense(6, 2),
            ],
            Loss::Mse,
        );
        let params = ParamSet::init(&net, &mut rng).unwrap();
        let x = rng.normal_tensor(&[5, 4], 1.0);
        let y = rng.normal_tensor(&[5, 2], 1.0);
        let (_, batch_loss) = evaluate(&net, &params, &x, &y).unwrap();
        let mut acc = 0.0;
        for b in 0..5 {
            let xb = Tensor::from_data(&[1, 4], x.data()[b * 4..(b + 1) * 4].to_vec()).unwrap();
            let yb = Tensor::from_data(&[1, 2], y.data()[b * 2..(b + 1) * 2].to_vec()).unwrap();
            let (_, l) = evaluate(&net, &params, &xb, &yb).unwrap();
            acc += l;
        }
        assert!((batch_loss - acc / 5.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = single_dense_net(3, 2, Loss::Mse);
        let mut rng = SeededRng::new(4);
        let params = ParamSet::init(&net, &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, 4], 1.0);
        assert!(matches!(forward(&net, &params, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn scale_layers_identity_and_product() {
        let mut rng = SeededRng::new(5);
        let net = NetworkSpec::new(
            vec![4],
            vec![
                LayerSpec::dense(4, 8),
                LayerSpec::activation(Activation::Relu),
                LayerSpec::dense(8, 3),
            ],
            Loss::SoftmaxCrossEntropy,
        );
        let params = ParamSet::init(&net, &mut rng).unwrap();
        let same = scale_layers(&params, &[1.0, 1.0]).unwrap();
        assert_eq!(same, params);

        let x = rng.normal_tensor(&[6, 4], 1.0);
        let base = forward(&net, &params, &x).unwrap();

        // product-1 factors leave ReLU logits unchanged (degree-1 homogeneity)
        let scaled = scale_layers(&params, &[2.0, 0.5]).unwrap();
        let out = forward(&net, &scaled, &x).unwrap();
        let diff = out.output().sub(base.output()).unwrap().norm();
        assert!(diff < 1e-12, "diff {diff}");

        // factors (2,3) scale logits by 6
        let scaled = scale_layers(&params, &[2.0, 3.0]).unwrap();
        let out = forward(&net, &scaled, &x).unwrap();
        let expect = base.output().scale(6.0);
        assert!(out.output().sub(&expect).unwrap().norm() < 1e-12);
    }

    #[test]
    fn scale_layers_rejects_non_positive() {
        let net = single_dense_net(2, 2, Loss::Mse);
        let mut rng = SeededRng::new(6);
        let params = ParamSet::init(&net, &mut rng).unwrap();
        assert!(matches!(scale_layers(&params, &[0.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn argmax_invariance_under_positive_scaling() {
        let mut rng = SeededRng::new(7);
        let net = NetworkSpec::new(
            vec![6],
            vec![
                LayerSpec::dense(6, 10),
                LayerSpec::activation(Activation::Relu),
                LayerSpec::dense(10, 4),
            ],
            Loss::SoftmaxCrossEntropy,
        );
        let params = ParamSet::init(&net, &mut rng).unwrap();
        let x = rng.normal_tensor(&[12, 6], 1.0);
        let base = forward(&net, &params, &x).unwrap();
        let scaled_params = scale_layers(&params, &[3.7, 0.21]).unwrap();
        let scaled = forward(&net, &scaled_params, &x).unwrap();
        let argmax = |t: &Tensor| -> Vec<usize> {
            t.data()
                .chunks_exact(4)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect()
        };
        assert_eq!(argmax(base.output()), argmax(scaled.output()));
    }

    #[test]
    fn maxpool_tie_takes_first_row_major_index() {
        let net = NetworkSpec::new(
            vec![1, 2, 2],
            vec![LayerSpec::MaxPool { size: 2, stride: 2 }],
            Loss::Mse,
        );
        let params = ParamSet { entries: vec![] };
        let x = Tensor::from_data(&[1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let trace = forward(&net, &params, &x).unwrap();
        let y = Tensor::from_data(&[1, 1, 1, 1], vec![0.0]).unwrap();
        let grads = backward(&net, &params, &trace, &y);
        assert!(grads.is_ok());
        let TraceAux::MaxPool { argmax } = &trace.steps[0].aux else { panic!() };
        assert_eq!(argmax, &vec![0]);
    }

    #[test]
    fn residual_block_shape_mismatch_rejected() {
        let net = NetworkSpec::new(
            vec![4],
            vec![LayerSpec::ResidualBlock { layers: vec![LayerSpec::dense(4, 3)] }],
            Loss::Mse,
        );
        assert!(matches!(net.validate(), Err(Error::Dimension(_))));
    }

    // ------------------------------------------------------------------
    // Finite-difference oracle over every layer kind
    // ------------------------------------------------------------------

    fn fd_check(net: &NetworkSpec, x: &Tensor, y: &Tensor, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let params = ParamSet::init(net, &mut rng).unwrap();
        let trace = forward(net, &params, x).unwrap();
        let grads = backward(net, &params, &trace, y).unwrap();
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (ei, entry) in params.entries.iter().enumerate() {
            for wi in 0..entry.weight.len() {
                let mut plus = params.clone();
                plus.entries[ei].weight.data_mut()[wi] += h;
                let (_, lp) = evaluate(net, &plus, x, y).unwrap();
                let mut minus = params.clone();
                minus.entries[ei].weight.data_mut()[wi] -= h;
                let (_, lm) = evaluate(net, &minus, x, y).unwrap();
                numeric.push((lp - lm) / (2.0 * h));
                analytic.push(grads.entries[ei].weight.data()[wi]);
            }
            if let Some(bias) = &entry.bias {
                for bi in 0..bias.len() {
                    let mut plus = params.clone();
                    plus.entries[ei].bias.as_mut().unwrap().data_mut()[bi] += h;
                    let (_, lp) = evaluate(net, &plus, x, y).unwrap();
                    let mut minus = params.clone();
                    minus.entries[ei].bias.as_mut().unwrap().data_mut()[bi] -= h;
                    let (_, lm) = evaluate(net, &minus, x, y).unwrap();
                    numeric.push((lp - lm) / (2.0 * h));
                    analytic.push(grads.entries[ei].bias.as_ref().unwrap().data()[bi]);
                }
            }
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / (norm + 1e-12);
        assert!(rel <= 1e-5, "finite-difference relative error {rel}");
    }

    #[test]
    fn finite_difference_dense_tanh_mse() {
        let net = NetworkSpec::new(
            vec![5],
            vec![
                LayerSpec::Dense { inputs: 5, outputs: 7, bias: true, penalize: true },
                LayerSpec::activation(Activation::Tanh),
                LayerSpec::dense(7, 3),
            ],
            Loss::Mse,
        );
        let mut rng = SeededRng::new(100);
        let x = rng.normal_tensor(&[4, 5], 1.0);
        let y = rng.normal_tensor(&[4, 3], 1.0);
        fd_check(&net, &x, &y, 200);
    }

    #[test]
    fn finite_difference_conv_pool_stack() {
        let net = NetworkSpec::new(
            vec![2, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: true,
                    penalize: true,
                },
                LayerSpec::activation(Activation::Softplus),
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 2,
                    stride: 1,
                    padding: 0,
                    bias: false,
                    penalize: true,
                },
                LayerSpec::AvgPool { size: 2, stride: 1 },
                LayerSpec::Flatten,
                LayerSpec::dense(2, 4),
            ],
            Loss::SoftmaxCrossEntropy,
        );
        let mut rng = SeededRng::new(101);
        let x = rng.normal_tensor(&[3, 2, 6, 6], 1.0);
        let y = Tensor::from_vec(vec![0.0, 2.0, 3.0]).unwrap();
        fd_check(&net, &x, &y, 201);
    }

    #[test]
    fn finite_difference_residual_sigmoid() {
        let net = NetworkSpec::new(
            vec![6],
            vec![
                LayerSpec::dense(6, 6),
                LayerSpec::ResidualBlock {
                    layers: vec![
                        LayerSpec::dense(6, 6),
                        LayerSpec::activation(Activation::Sigmoid),
                        LayerSpec::dense(6, 6),
                    ],
                },
                LayerSpec::activation(Activation::Relu),
                LayerSpec::dense(6, 2),
            ],
            Loss::Mse,
        );
        let mut rng = SeededRng::new(102);
        let x = rng.normal_tensor(&[4, 6], 1.0);
        let y = rng.normal_tensor(&[4, 2], 1.0);
        fd_check(&net, &x, &y, 202);
    }

    #[test]
    fn finite_difference_conv_residual() {
        let net = NetworkSpec::new(
            vec![2, 5, 5],
            vec![
                LayerSpec::ResidualBlock {
                    layers: vec![
                        LayerSpec::conv(2, 4, 3, 1),
                        LayerSpec::activation(Activation::Tanh),
                        LayerSpec::conv(4, 2, 3, 1),
                    ],
                },
                LayerSpec::Flatten,
                LayerSpec::dense(50, 3),
            ],
            Loss::SoftmaxCrossEntropy,
        );
        let mut rng = SeededRng::new(103);
        let x = rng.normal_tensor(&[2, 2, 5, 5], 1.0);
        let y = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        fd_check(&net, &x, &y, 203);
    }
}
