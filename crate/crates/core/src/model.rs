//! Declarative small networks: fully connected, convolution, ReLU, max-pool
//! and flatten layers over a flat parameter vector.
//!
//! Parameter layout: parameterized layers in order, each contributing its
//! weight block followed by its bias. FC weights are `[d_out, d_in]` row-major
//! (`z = W a + b`); convolution kernels are `[c_out, c_in, k1, k2]` row-major.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{col_index, Graph, Var, ZERO_INDEX};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer {layer}: {reason}")]
    Spec { layer: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activations produced by layer {layer}")]
    NonFinite { layer: usize },
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    FullyConnected {
        d_in: usize,
        d_out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        k1: usize,
        k2: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn fc(d_in: usize, d_out: usize) -> Self {
        LayerSpec::FullyConnected { d_in, d_out, bias: true }
    }

    pub fn conv(c_in: usize, c_out: usize, k: usize) -> Self {
        LayerSpec::Conv2d {
            c_in,
            c_out,
            k1: k,
            k2: k,
            stride: 1,
            padding: 0,
            bias: true,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::FullyConnected { .. } | LayerSpec::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample input shape: `[D]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    FullyConnected,
    Conv2d,
}

/// Where a parameterized layer lives in the flat vector and which shapes it
/// maps between (per sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSlot {
    /// Index into `ModelSpec::layers`.
    pub layer: usize,
    /// Position among parameterized layers, from 0.
    pub ordinal: usize,
    pub kind: LayerKind,
    pub weight: Range<usize>,
    pub weight_shape: Vec<usize>,
    pub bias: Option<Range<usize>>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Convolution stride and zero padding (1 and 0 for FC layers).
    pub stride: usize,
    pub padding: usize,
}

impl LayerSlot {
    /// Full parameter range (weights then bias).
    pub fn range(&self) -> Range<usize> {
        let end = self.bias.as_ref().map_or(self.weight.end, |b| b.end);
        self.weight.start..end
    }
}

/// Partition of the flat parameter vector into layer slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<LayerSlot>,
    /// Per-sample shape after each layer of the spec.
    pub shapes: Vec<Vec<usize>>,
    pub dim: usize,
}

impl Layout {
    pub fn slot_for_layer(&self, layer: usize) -> Option<&LayerSlot> {
        self.slots.iter().find(|s| s.layer == layer)
    }

    /// Spec layer index owning parameter `index`.
    pub fn layer_of(&self, index: usize) -> Option<usize> {
        self.slots.iter().find(|s| s.range().contains(&index)).map(|s| s.layer)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || k == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl ModelSpec {
    /// Multi-layer perceptron over `dims` with ReLU between layers.
    pub fn mlp(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            if !layers.is_empty() {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::fc(w[0], w[1]));
        }
        ModelSpec {
            input_shape: vec![dims[0]],
            layers,
            num_classes: *dims.last().unwrap(),
        }
    }

    /// The CIFAR-100 convolutional network (two conv/pool stages, three FC).
    pub fn cifar100() -> Self {
        ModelSpec {
            input_shape: vec![3, 32, 32],
            layers: vec![
                LayerSpec::conv(3, 64, 5),
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::conv(64, 64, 5),
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::fc(1600, 384),
                LayerSpec::Relu,
                LayerSpec::fc(384, 192),
                LayerSpec::Relu,
                LayerSpec::fc(192, 100),
            ],
            num_classes: 100,
        }
    }

    /// Validates shape chaining and computes the parameter layout.
    pub fn layout(&self) -> Result<Layout, ModelError> {
        let spec_err = |layer: usize, reason: String| ModelError::Spec { layer, reason };
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(spec_err(0, format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut slots = Vec::new();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let input_shape = shape.clone();
            shape = match *layer {
                LayerSpec::FullyConnected { d_in, d_out, bias } => {
                    if shape != [d_in] {
                        return Err(spec_err(l, format!("expects input [{d_in}], receives {shape:?}")));
                    }
                    if d_out == 0 {
                        return Err(spec_err(l, "zero output width".into()));
                    }
                    let weight = offset..offset + d_in * d_out;
                    offset = weight.end;
                    let bias = bias.then(|| {
                        let r = offset..offset + d_out;
                        offset = r.end;
                        r
                    });
                    slots.push(LayerSlot {
                        layer: l,
                        ordinal: slots.len(),
                        kind: LayerKind::FullyConnected,
                        weight,
                        weight_shape: vec![d_out, d_in],
                        bias,
                        input_shape,
                        output_shape: vec![d_out],
                        stride: 1,
                        padding: 0,
                    });
                    vec![d_out]
                }
                LayerSpec::Conv2d {
                    c_in,
                    c_out,
                    k1,
                    k2,
                    stride,
                    padding,
                    bias,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(spec_err(l, format!("expects [C, H, W] input, receives {shape:?}")));
                    };
                    if c != c_in {
                        return Err(spec_err(l, format!("expects {c_in} channels, receives {c}")));
                    }
                    if c_out == 0 {
                        return Err(spec_err(l, "zero output channels".into()));
                    }
                    let (Some(ho), Some(wo)) = (conv_out(h, k1, stride, padding), conv_out(w, k2, stride, padding))
                    else {
                        return Err(spec_err(l, format!("kernel {k1}x{k2} does not fit input {h}x{w}")));
                    };
                    let weight = offset..offset + c_out * c_in * k1 * k2;
                    offset = weight.end;
                    let bias = bias.then(|| {
                        let r = offset..offset + c_out;
                        offset = r.end;
                        r
                    });
                    let out = vec![c_out, ho, wo];
                    slots.push(LayerSlot {
                        layer: l,
                        ordinal: slots.len(),
                        kind: LayerKind::Conv2d,
                        weight,
                        weight_shape: vec![c_out, c_in, k1, k2],
                        bias,
                        input_shape,
                        output_shape: out.clone(),
                        stride,
                        padding,
                    });
                    out
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { k, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(spec_err(l, format!("max-pool expects [C, H, W], receives {shape:?}")));
                    };
                    let (Some(ho), Some(wo)) = (conv_out(h, k, stride, 0), conv_out(w, k, stride, 0)) else {
                        return Err(spec_err(l, format!("pool window {k} does not fit {h}x{w}")));
                    };
                    vec![c, ho, wo]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            shapes.push(shape.clone());
        }
        if slots.is_empty() {
            return Err(spec_err(0, "no parameterized layer".into()));
        }
        if shape != [self.num_classes] {
            return Err(spec_err(
                self.layers.len() - 1,
                format!("final output {shape:?} does not equal [{}]", self.num_classes),
            ));
        }
        Ok(Layout {
            slots,
            shapes,
            dim: offset,
        })
    }
}

/// Flat parameters paired with the layout that partitions them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Result<Self, ModelError> {
        let layout = spec.layout()?;
        Ok(ParamVector {
            values: vec![0.0; layout.dim],
            layout,
        })
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self, ModelError> {
        let layout = spec.layout()?;
        if values.len() != layout.dim {
            return Err(ModelError::Shape(format!(
                "parameter vector has {} entries, spec needs {}",
                values.len(),
                layout.dim
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn weights(&self, ordinal: usize) -> &[f64] {
        &self.values[self.layout.slots[ordinal].weight.clone()]
    }

    pub fn weights_mut(&mut self, ordinal: usize) -> &mut [f64] {
        let r = self.layout.slots[ordinal].weight.clone();
        &mut self.values[r]
    }

    pub fn bias_mut(&mut self, ordinal: usize) -> Option<&mut [f64]> {
        let r = self.layout.slots[ordinal].bias.clone()?;
        Some(&mut self.values[r])
    }
}

/// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<ParamVector, ModelError> {
    let mut params = ParamVector::zeros(spec)?;
    for slot in params.layout.slots.clone() {
        let fan_in: usize = slot.weight_shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for w in &mut params.values[slot.weight.clone()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Inputs to one parameterized layer over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedInput {
    pub layer: usize,
    pub ordinal: usize,
    /// `[B, ...]`: the tensor fed directly into the layer.
    pub activation: Tensor,
}

/// Every parameterized layer's direct input, plus the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    pub entries: Vec<CapturedInput>,
    pub logits: Tensor,
    pub batch_size: usize,
}

/// Graph handles produced by [`record_forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Output of every recorded layer, indexed from the first recorded one.
    pub outputs: Vec<Var>,
    /// `(ordinal, input)` for each parameterized layer, when capturing.
    pub captures: Vec<(usize, Var)>,
}

fn param_slice(g: &mut Graph, params: Var, range: Range<usize>, shape: Vec<usize>) -> Var {
    let idx: Arc<[usize]> = range.collect::<Vec<_>>().into();
    g.gather(params, idx, shape)
}

fn add_bias(g: &mut Graph, params: Var, range: Option<Range<usize>>, rows: usize, x: Var) -> Var {
    match range {
        None => x,
        Some(r) => {
            let cols = r.len();
            let b = param_slice(g, params, r, vec![cols]);
            let bb = g.gather(b, col_index(rows, cols), vec![rows, cols]);
            g.add(x, bb)
        }
    }
}

fn im2col_index(b: usize, c: usize, h: usize, w: usize, k1: usize, k2: usize, stride: usize, padding: usize) -> (Arc<[usize]>, usize, usize) {
    let ho = (h + 2 * padding - k1) / stride + 1;
    let wo = (w + 2 * padding - k2) / stride + 1;
    let mut idx = Vec::with_capacity(b * ho * wo * c * k1 * k2);
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ci in 0..c {
                    for ky in 0..k1 {
                        for kx in 0..k2 {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                idx.push(ZERO_INDEX);
                            } else {
                                idx.push(((bi * c + ci) * h + iy as usize) * w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    (idx.into(), ho, wo)
}

/// Records a convolution of `x: [B, C, H, W]` with kernel `weight:
/// [c_out, C·k1·k2]` as im2col followed by a matrix product.
#[allow(clippy::too_many_arguments)]
pub fn record_conv2d(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    c_out: usize,
    k1: usize,
    k2: usize,
    stride: usize,
    padding: usize,
) -> Var {
    let [b, c, h, w] = g.shape(x)[..] else {
        panic!("conv input must be [B, C, H, W]");
    };
    let (idx, ho, wo) = im2col_index(b, c, h, w, k1, k2, stride, padding);
    let rows = b * ho * wo;
    let cols = g.gather(x, idx, vec![rows, c * k1 * k2]);
    let mut y = g.matmul(cols, weight, false, true);
    if let Some(bv) = bias {
        let bb = g.gather(bv, col_index(rows, c_out), vec![rows, c_out]);
        y = g.add(y, bb);
    }
    let mut perm = Vec::with_capacity(rows * c_out);
    for bi in 0..b {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    perm.push(((bi * ho + oy) * wo + ox) * c_out + o);
                }
            }
        }
    }
    g.gather(y, perm.into(), vec![b, c_out, ho, wo])
}

fn record_max_pool(g: &mut Graph, x: Var, k: usize, stride: usize) -> Var {
    let [b, c, h, w] = g.shape(x)[..] else {
        panic!("max-pool input must be [B, C, H, W]");
    };
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let data = g.value(x).data();
    let mut idx = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                // first maximum in row-major window order wins ties
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    g.gather(x, idx.into(), vec![b, c, ho, wo])
}

/// Records the network on `g`. `input` is `[B, ...input_shape]`; parameters
/// are read from the flat node `params` according to `layout`.
pub fn record_forward(
    spec: &ModelSpec,
    layout: &Layout,
    g: &mut Graph,
    params: Var,
    input: Var,
    capture: bool,
) -> Result<ForwardTrace, ModelError> {
    let expected = &spec.input_shape;
    let shape = g.shape(input).to_vec();
    if shape.len() != expected.len() + 1 || &shape[1..] != expected.as_slice() {
        return Err(ModelError::Shape(format!(
            "batch shape {shape:?} does not match input shape {expected:?}"
        )));
    }
    record_layers(spec, layout, g, params, input, 0, capture)
}

/// Records layers `from..` of the network on an input that already has the
/// per-sample shape layer `from` expects.
pub fn record_layers(
    spec: &ModelSpec,
    layout: &Layout,
    g: &mut Graph,
    params: Var,
    input: Var,
    from: usize,
    capture: bool,
) -> Result<ForwardTrace, ModelError> {
    let batch = g.shape(input)[0];
    let mut x = input;
    let mut captures = Vec::new();
    let mut outputs = Vec::new();
    let mut slots = layout.slots.iter().filter(|s| s.layer >= from);
    for (l, layer) in spec.layers.iter().enumerate().skip(from) {
        x = match *layer {
            LayerSpec::FullyConnected { d_in, d_out, .. } => {
                let slot = slots.next().expect("layout matches spec");
                if capture {
                    captures.push((slot.ordinal, x));
                }
                let w = param_slice(g, params, slot.weight.clone(), vec![d_out, d_in]);
                let z = g.matmul(x, w, false, true);
                add_bias(g, params, slot.bias.clone(), batch, z)
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                k1,
                k2,
                stride,
                padding,
                ..
            } => {
                let slot = slots.next().expect("layout matches spec");
                if capture {
                    captures.push((slot.ordinal, x));
                }
                let w = param_slice(g, params, slot.weight.clone(), vec![c_out, c_in * k1 * k2]);
                let b = slot
                    .bias
                    .clone()
                    .map(|r| param_slice(g, params, r, vec![c_out]));
                record_conv2d(g, x, w, b, c_out, k1, k2, stride, padding)
            }
            LayerSpec::Relu => g.relu(x),
            LayerSpec::MaxPool { k, stride } => record_max_pool(g, x, k, stride),
            LayerSpec::Flatten => {
                let n: usize = g.shape(x)[1..].iter().product();
                g.reshape(x, vec![batch, n])
            }
        };
        if !g.value(x).is_finite() {
            return Err(ModelError::NonFinite { layer: l });
        }
        outputs.push(x);
    }
    Ok(ForwardTrace {
        logits: x,
        outputs,
        captures,
    })
}

/// Evaluates logits `[B, C]` and, if asked, the activation capture.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &Tensor,
    capture: bool,
) -> Result<(Tensor, Option<ActivationCapture>), ModelError> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(params.values.clone()));
    let x = g.constant(inputs.clone());
    let trace = record_forward(spec, &params.layout, &mut g, p, x, capture)?;
    let logits = g.value(trace.logits).clone();
    let cap = capture.then(|| ActivationCapture {
        entries: trace
            .captures
            .iter()
            .map(|&(ordinal, v)| CapturedInput {
                layer: params.layout.slots[ordinal].layer,
                ordinal,
                activation: g.value(v).clone(),
            })
            .collect(),
        logits: logits.clone(),
        batch_size: inputs.shape()[0],
    });
    Ok((logits, cap))
}

/// Direct convolution that counts every scalar multiplication, padded taps
/// included. `input: [B, C, H, W]`, `kernel: [c_out, C, k1, k2]`.
pub fn conv2d_instrumented(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, u64), ModelError> {
    let [b, c, h, w] = input.shape()[..] else {
        return Err(ModelError::Shape(format!("input {:?} is not [B, C, H, W]", input.shape())));
    };
    let [c_out, kc, k1, k2] = kernel.shape()[..] else {
        return Err(ModelError::Shape(format!("kernel {:?} is not [O, C, K1, K2]", kernel.shape())));
    };
    if kc != c {
        return Err(ModelError::Shape(format!("kernel expects {kc} channels, input has {c}")));
    }
    if bias.is_some_and(|bv| bv.len() != c_out) {
        return Err(ModelError::Shape("bias length differs from output channels".into()));
    }
    let (Some(ho), Some(wo)) = (conv_out(h, k1, stride, padding), conv_out(w, k2, stride, padding)) else {
        return Err(ModelError::Shape(format!("kernel {k1}x{k2} does not fit {h}x{w}")));
    };
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; b * c_out * ho * wo];
    let mut count = 0u64;
    for bi in 0..b {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k1 {
                            for kx in 0..k2 {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let xv = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                };
                                acc += xv * kd[((o * c + ci) * k1 + ky) * k2 + kx];
                                count += 1;
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv[o];
                    }
                    out[((bi * c_out + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok((Tensor::raw(vec![b, c_out, ho, wo], out), count))
}
