//! Plain feed-forward (VGG-style) networks and a forward pass that keeps
//! every intermediate activation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{argmax, Shape3, Tensor1, Tensor3, TensorError, Window};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("expected input {expected}, got {found}")]
    InputShape { expected: String, found: String },
    #[error("{what}: expected {expected} values, got {found}")]
    ParamLength {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite {0}")]
    NonFiniteWeight(&'static str),
    #[error("window geometry yields an empty output for input {0}")]
    EmptyOutput(Shape3),
    #[error("invalid layer: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: LayerError,
    },
    #[error("network input must be {expected}, got {found}")]
    InputShape { expected: Shape3, found: Shape3 },
    #[error("invalid network structure: {0}")]
    Structure(String),
}

/// Shape of one activation in the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Spatial(Shape3),
    Flat(usize),
}

impl std::fmt::Display for ActShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActShape::Spatial(s) => write!(f, "spatial {s}"),
            ActShape::Flat(n) => write!(f, "flat ({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Spatial(Tensor3),
    Flat(Tensor1),
}

impl Activation {
    pub fn shape(&self) -> ActShape {
        match self {
            Activation::Spatial(t) => ActShape::Spatial(t.shape()),
            Activation::Flat(t) => ActShape::Flat(t.len()),
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            Activation::Spatial(t) => t.data(),
            Activation::Flat(t) => t.data(),
        }
    }

    pub fn as_spatial(&self) -> Option<&Tensor3> {
        match self {
            Activation::Spatial(t) => Some(t),
            Activation::Flat(_) => None,
        }
    }

    pub fn as_flat(&self) -> Option<&Tensor1> {
        match self {
            Activation::Flat(t) => Some(t),
            Activation::Spatial(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    window: Window,
    /// `(out, in, kh, kw)` order.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        window: Window,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, LayerError> {
        if in_channels == 0 || out_channels == 0 || window.kernel_h == 0 || window.kernel_w == 0 || window.stride == 0 {
            return Err(LayerError::Invalid(format!(
                "conv needs positive channels, kernel and stride (in {in_channels}, out {out_channels}, {window:?})"
            )));
        }
        let expected = out_channels * in_channels * window.kernel_h * window.kernel_w;
        check_params("conv weights", &weights, expected)?;
        check_params("conv bias", &bias, out_channels)?;
        Ok(Self {
            in_channels,
            out_channels,
            window,
            weights,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Kernel of output channel `f`, laid out `(in, kh, kw)`.
    pub fn kernel(&self, f: usize) -> &[f32] {
        let n = self.in_channels * self.window.kernel_h * self.window.kernel_w;
        &self.weights[f * n..(f + 1) * n]
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, LayerError> {
        if input.channels != self.in_channels {
            return Err(LayerError::InputShape {
                expected: format!("{} channels", self.in_channels),
                found: input.to_string(),
            });
        }
        let (h, w) = self
            .window
            .output_dims(input.height, input.width)
            .ok_or(LayerError::EmptyOutput(input))?;
        Ok(Shape3::new(self.out_channels, h, w)?)
    }

    /// `out[f,y,x] = bias[f] + Σ W[f,c,i,j]·in[c, y·s+i−pad, x·s+j−pad]`, zero padding.
    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3, LayerError> {
        let in_shape = input.shape();
        let out_shape = self.output_shape(in_shape)?;
        let (oh, ow) = (out_shape.height, out_shape.width);
        let Window {
            kernel_h,
            kernel_w,
            stride,
            pad,
        } = self.window;
        let (ih, iw) = (in_shape.height, in_shape.width);

        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(f, plane)| {
            let kernel = self.kernel(f);
            let mut acc = vec![0.0f64; oh * ow];
            for c in 0..self.in_channels {
                let src = input.channel(c);
                for i in 0..kernel_h {
                    for j in 0..kernel_w {
                        let w = kernel[(c * kernel_h + i) * kernel_w + j] as f64;
                        for y in 0..oh {
                            let Some(sy) = (y * stride + i).checked_sub(pad).filter(|&v| v < ih) else {
                                continue;
                            };
                            let row = &src[sy * iw..(sy + 1) * iw];
                            let acc_row = &mut acc[y * ow..(y + 1) * ow];
                            for (x, a) in acc_row.iter_mut().enumerate() {
                                if let Some(sx) = (x * stride + j).checked_sub(pad).filter(|&v| v < iw) {
                                    *a += w * row[sx] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let b = self.bias[f] as f64;
            for (o, a) in plane.iter_mut().zip(acc) {
                *o = (a + b) as f32;
            }
        });
        Ok(Tensor3::from_vec(out_shape, out)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolLayer {
    window: Window,
}

impl PoolLayer {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize) -> Result<Self, LayerError> {
        if kernel_h == 0 || kernel_w == 0 || stride == 0 {
            return Err(LayerError::Invalid("max pool needs positive kernel and stride".into()));
        }
        Ok(Self {
            window: Window::new(kernel_h, kernel_w, stride, 0),
        })
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, LayerError> {
        let (h, w) = self
            .window
            .output_dims(input.height, input.width)
            .ok_or(LayerError::EmptyOutput(input))?;
        Ok(Shape3::new(input.channels, h, w)?)
    }

    /// Windowed max per channel; incomplete trailing windows are dropped.
    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3, LayerError> {
        let in_shape = input.shape();
        let out_shape = self.output_shape(in_shape)?;
        let Window {
            kernel_h,
            kernel_w,
            stride,
            ..
        } = self.window;
        let mut out = Vec::with_capacity(out_shape.len());
        for c in 0..in_shape.channels {
            let src = input.channel(c);
            for y in 0..out_shape.height {
                for x in 0..out_shape.width {
                    let mut best = f32::NEG_INFINITY;
                    for i in 0..kernel_h {
                        let row = (y * stride + i) * in_shape.width + x * stride;
                        for &v in &src[row..row + kernel_w] {
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        Ok(Tensor3::from_vec(out_shape, out)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out, in)`.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self, LayerError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(LayerError::Invalid("dense layer needs positive dimensions".into()));
        }
        check_params("dense weights", &weights, in_dim * out_dim)?;
        check_params("dense bias", &bias, out_dim)?;
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.weights[k * self.in_dim..(k + 1) * self.in_dim]
    }

    pub fn forward(&self, input: &Tensor1) -> Result<Tensor1, LayerError> {
        if input.len() != self.in_dim {
            return Err(LayerError::InputShape {
                expected: format!("flat ({})", self.in_dim),
                found: format!("flat ({})", input.len()),
            });
        }
        let a = input.data();
        let out: Vec<f32> = (0..self.out_dim)
            .into_par_iter()
            .map(|k| {
                let dot: f64 = self
                    .row(k)
                    .iter()
                    .zip(a)
                    .map(|(&w, &v)| w as f64 * v as f64)
                    .sum();
                (dot + self.bias[k] as f64) as f32
            })
            .collect();
        Ok(Tensor1::from_vec(out)?)
    }
}

fn check_params(what: &'static str, values: &[f32], expected: usize) -> Result<(), LayerError> {
    if values.len() != expected {
        return Err(LayerError::ParamLength {
            what,
            expected,
            found: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LayerError::NonFiniteWeight(what));
    }
    Ok(())
}

pub fn relu(input: &Activation) -> Activation {
    let clamp = |d: &[f32]| d.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>();
    match input {
        Activation::Spatial(t) => Activation::Spatial(
            Tensor3::from_vec(t.shape(), clamp(t.data())).expect("relu preserves shape"),
        ),
        Activation::Flat(t) => Activation::Flat(Tensor1::from_vec(clamp(t.data())).expect("finite")),
    }
}

/// Max-subtracted softmax. Panics on empty input.
pub fn softmax(input: &Tensor1) -> Tensor1 {
    let d = input.data();
    assert!(!d.is_empty(), "softmax of empty vector");
    let max = d.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = d.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor1::from_vec(exps.iter().map(|e| (e / sum) as f32).collect()).expect("finite")
}

/// Channel-major linearisation: index = c·H·W + y·W + x.
pub fn flatten(input: &Tensor3) -> Tensor1 {
    Tensor1::from_vec(input.data().to_vec()).expect("finite")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool(PoolLayer),
    Flatten,
    Dense(DenseLayer),
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
        }
    }

    pub fn output_shape(&self, input: ActShape) -> Result<ActShape, LayerError> {
        let spatial = |s: ActShape| match s {
            ActShape::Spatial(s) => Ok(s),
            other => Err(LayerError::InputShape {
                expected: "spatial input".into(),
                found: other.to_string(),
            }),
        };
        let flat = |s: ActShape| match s {
            ActShape::Flat(n) => Ok(n),
            other => Err(LayerError::InputShape {
                expected: "flat input".into(),
                found: other.to_string(),
            }),
        };
        Ok(match self {
            Layer::Conv(c) => ActShape::Spatial(c.output_shape(spatial(input)?)?),
            Layer::MaxPool(p) => ActShape::Spatial(p.output_shape(spatial(input)?)?),
            Layer::Relu => input,
            Layer::Flatten => ActShape::Flat(spatial(input)?.len()),
            Layer::Dense(d) => {
                let n = flat(input)?;
                if n != d.in_dim {
                    return Err(LayerError::InputShape {
                        expected: format!("flat ({})", d.in_dim),
                        found: format!("flat ({n})"),
                    });
                }
                ActShape::Flat(d.out_dim)
            }
            Layer::Softmax => ActShape::Flat(flat(input)?),
        })
    }

    pub fn forward(&self, input: &Activation) -> Result<Activation, LayerError> {
        self.output_shape(input.shape())?;
        Ok(match (self, input) {
            (Layer::Conv(c), Activation::Spatial(t)) => Activation::Spatial(c.forward(t)?),
            (Layer::MaxPool(p), Activation::Spatial(t)) => Activation::Spatial(p.forward(t)?),
            (Layer::Relu, a) => relu(a),
            (Layer::Flatten, Activation::Spatial(t)) => Activation::Flat(flatten(t)),
            (Layer::Dense(d), Activation::Flat(t)) => Activation::Flat(d.forward(t)?),
            (Layer::Softmax, Activation::Flat(t)) => Activation::Flat(softmax(t)),
            _ => unreachable!("output_shape rejected the input kind"),
        })
    }
}

/// A validated plain chain of layers ending in `Dense → Softmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_shape: Shape3,
    layers: Vec<Layer>,
    class_labels: Vec<String>,
    shapes: Vec<ActShape>,
}

impl NetworkSpec {
    pub fn new(input_shape: Shape3, layers: Vec<Layer>, class_labels: Vec<String>) -> Result<Self, NetworkError> {
        let mut shapes = vec![ActShape::Spatial(input_shape)];
        let mut flatten_seen = false;
        let mut dense_seen = false;
        for (index, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Flatten if flatten_seen || dense_seen => {
                    return Err(NetworkError::Structure(format!(
                        "flatten at layer {index} must appear once, before the first dense layer"
                    )))
                }
                Layer::Flatten => flatten_seen = true,
                Layer::Dense(_) => dense_seen = true,
                _ => {}
            }
            let prev = *shapes.last().expect("non-empty");
            let next = layer.output_shape(prev).map_err(|source| NetworkError::Layer {
                index,
                kind: layer.kind(),
                source,
            })?;
            shapes.push(next);
        }
        let n = layers.len();
        let ends_right = n >= 2 && matches!(layers[n - 1], Layer::Softmax) && matches!(layers[n - 2], Layer::Dense(_));
        if !ends_right {
            return Err(NetworkError::Structure("network must end with dense followed by softmax".into()));
        }
        let classes = match shapes[n] {
            ActShape::Flat(k) => k,
            ActShape::Spatial(_) => unreachable!("softmax output is flat"),
        };
        if class_labels.len() != classes {
            return Err(NetworkError::Structure(format!(
                "{} class labels for {classes} outputs",
                class_labels.len()
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            class_labels,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Statically checked activation shapes; entry 0 is the input.
    pub fn shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    /// Runs the network, recording every layer output. Returns the trace and
    /// the predicted class (smallest index on ties).
    pub fn forward_with_trace(&self, input: &Tensor3) -> Result<(ActivationTrace, usize), NetworkError> {
        if input.shape() != self.input_shape {
            return Err(NetworkError::InputShape {
                expected: self.input_shape,
                found: input.shape(),
            });
        }
        let mut entries = Vec::with_capacity(self.layers.len() + 1);
        entries.push(Activation::Spatial(input.clone()));
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer
                .forward(entries.last().expect("non-empty"))
                .map_err(|source| NetworkError::Layer {
                    index,
                    kind: layer.kind(),
                    source,
                })?;
            log::debug!("layer {index} ({}) -> {}", layer.kind(), next.shape());
            entries.push(next);
        }
        let trace = ActivationTrace { entries };
        let predicted = argmax(trace.output().data());
        Ok((trace, predicted))
    }
}

/// Per-layer outputs of one forward pass; entry 0 is the (preprocessed) input,
/// entry `k + 1` the output of layer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    entries: Vec<Activation>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Activation {
        &self.entries[index]
    }

    pub fn entries(&self) -> &[Activation] {
        &self.entries
    }

    pub fn input(&self) -> &Tensor3 {
        self.entries[0].as_spatial().expect("trace input is spatial")
    }

    pub fn output(&self) -> &Tensor1 {
        self.entries
            .last()
            .and_then(Activation::as_flat)
            .expect("trace output is flat")
    }
}
