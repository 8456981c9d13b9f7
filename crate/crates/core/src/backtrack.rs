//! Decision backtracking.
//!
//! Starting from one output class, the recorded forward pass is unrolled one
//! layer at a time. At every layer the frontier of important nodes (`M1`) is
//! resolved into the nodes of the preceding activation that drove them
//! (`M2`), and `M2` becomes the next `M1`:
//!
//! * dense: inputs with a strictly positive contribution `W[k,j]·A[j]`,
//!   strongest first, capped at `top_n_fc`;
//! * flatten: the flat index is unravelled back to `(channel, y, x)`;
//! * conv: the input channel(s) whose receptive-field contribution sums are
//!   largest, and inside each the single strongest contributing position;
//! * max pool: the winning position of the pooling window;
//! * relu / softmax: identity (relu drops nodes whose output was zero).
//!
//! Frontiers are deduplicated after every layer.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ActShape, Activation, ActivationTrace, ConvLayer, DenseLayer, Layer, NetworkSpec, PoolLayer};
use crate::tensor::{argmax, Shape3, Tensor1, Tensor3, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BacktrackError {
    #[error("invalid backtrack config: {0}")]
    Config(String),
    #[error("node {node} is outside {shape}")]
    NodeOutOfRange { node: String, shape: String },
    #[error("previous activation {found} does not fit layer input {expected}")]
    ShapeMismatch { expected: String, found: String },
    #[error("trace does not belong to this network: {0}")]
    TraceMismatch(String),
    #[error("start class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Location of a node inside a spatial activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpatialLoc {
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

impl SpatialLoc {
    pub fn new(channel: usize, y: usize, x: usize) -> Self {
        Self { channel, y, x }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeLoc {
    Flat(usize),
    Spatial(SpatialLoc),
}

impl std::fmt::Display for NodeLoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeLoc::Flat(i) => write!(f, "flat[{i}]"),
            NodeLoc::Spatial(s) => write!(f, "[{}, {}, {}]", s.channel, s.y, s.x),
        }
    }
}

/// Ordered, duplicate-free frontier for one trace entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryVector {
    trace_index: usize,
    nodes: Vec<NodeLoc>,
    seen: HashSet<NodeLoc>,
}

impl MemoryVector {
    pub fn new(trace_index: usize) -> Self {
        Self {
            trace_index,
            nodes: Vec::new(),
            seen: HashSet::new(),
        }
    }

    /// Index into the [`ActivationTrace`] whose nodes this frontier holds.
    pub fn trace_index(&self) -> usize {
        self.trace_index
    }

    /// Returns `false` when the node was already present.
    pub fn insert(&mut self, node: NodeLoc) -> bool {
        let fresh = self.seen.insert(node);
        if fresh {
            self.nodes.push(node);
        }
        fresh
    }

    pub fn nodes(&self) -> &[NodeLoc] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// How the bias of the target node enters the per-input contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Rank inputs by `W·A` alone.
    #[default]
    Exclude,
    /// Add the target's bias to every per-input contribution (`W·A + b`
    /// taken elementwise).
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktrackConfig {
    /// Cap on positively contributing inputs kept per dense target; `None`
    /// keeps all of them.
    pub top_n_fc: Option<usize>,
    /// Number of input channels followed per conv target. `usize::MAX`
    /// follows every positively contributing channel.
    pub conv_channels: usize,
    pub bias: BiasMode,
}

impl Default for BacktrackConfig {
    fn default() -> Self {
        Self {
            top_n_fc: Some(10),
            conv_channels: 1,
            bias: BiasMode::Exclude,
        }
    }
}

impl BacktrackConfig {
    pub fn validate(&self) -> Result<(), BacktrackError> {
        if self.top_n_fc == Some(0) {
            return Err(BacktrackError::Config("top_n_fc must be at least 1".into()));
        }
        if self.conv_channels == 0 {
            return Err(BacktrackError::Config("conv_channels must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inputs of dense node `target` with a strictly positive contribution,
/// strongest first (smaller index on ties), truncated to `top_n_fc`.
pub fn backtrack_fc(
    target: usize,
    layer: &DenseLayer,
    prev: &Tensor1,
    cfg: &BacktrackConfig,
) -> Result<Vec<usize>, BacktrackError> {
    if target >= layer.out_dim() {
        return Err(BacktrackError::NodeOutOfRange {
            node: format!("flat[{target}]"),
            shape: format!("dense output ({})", layer.out_dim()),
        });
    }
    if prev.len() != layer.in_dim() {
        return Err(BacktrackError::ShapeMismatch {
            expected: format!("flat ({})", layer.in_dim()),
            found: format!("flat ({})", prev.len()),
        });
    }
    let bias = match cfg.bias {
        BiasMode::Exclude => 0.0,
        BiasMode::Broadcast => layer.bias()[target] as f64,
    };
    let mut picked: Vec<(usize, f64)> = layer
        .row(target)
        .iter()
        .zip(prev.data())
        .map(|(&w, &a)| w as f64 * a as f64 + bias)
        .enumerate()
        .filter(|&(_, c)| c > 0.0)
        .collect();
    // stable: equal contributions keep index order
    picked.sort_by(|a, b| b.1.total_cmp(&a.1));
    if let Some(n) = cfg.top_n_fc {
        picked.truncate(n);
    }
    Ok(picked.into_iter().map(|(j, _)| j).collect())
}

/// Inverts the channel-major flatten of `shape`.
pub fn backtrack_first_fc(index: usize, shape: Shape3) -> Result<SpatialLoc, BacktrackError> {
    if index >= shape.len() {
        return Err(BacktrackError::NodeOutOfRange {
            node: format!("flat[{index}]"),
            shape: shape.to_string(),
        });
    }
    let (channel, y, x) = shape.unravel(index);
    Ok(SpatialLoc { channel, y, x })
}

/// Resolves one conv output node to the strongest contributing input
/// position(s). See the module docs for the selection rule.
pub fn backtrack_conv(
    target: SpatialLoc,
    layer: &ConvLayer,
    prev: &Tensor3,
    cfg: &BacktrackConfig,
) -> Result<Vec<SpatialLoc>, BacktrackError> {
    let in_shape = prev.shape();
    let out_shape = layer.output_shape(in_shape).map_err(|e| BacktrackError::ShapeMismatch {
        expected: format!("{} channels", layer.in_channels()),
        found: format!("{in_shape} ({e})"),
    })?;
    if target.channel >= out_shape.channels {
        return Err(BacktrackError::NodeOutOfRange {
            node: NodeLoc::Spatial(target).to_string(),
            shape: out_shape.to_string(),
        });
    }
    let window = layer.window();
    let field = prev.receptive_field_named((target.y, target.x), window, "conv")?;
    let kernel = layer.kernel(target.channel);
    let area = window.kernel_h * window.kernel_w;

    let products: Vec<f64> = kernel
        .iter()
        .zip(field.data())
        .map(|(&w, &a)| w as f64 * a as f64)
        .collect();
    let bias = match cfg.bias {
        BiasMode::Exclude => 0.0,
        BiasMode::Broadcast => layer.bias()[target.channel] as f64 * area as f64,
    };
    let sums: Vec<f64> = products
        .chunks(area)
        .map(|ch| ch.iter().sum::<f64>() + bias)
        .collect();

    let mut positive: Vec<usize> = (0..sums.len()).filter(|&c| sums[c] > 0.0).collect();
    let channels = if positive.is_empty() {
        log::trace!("conv node {target:?}: no positive channel, following argmax channel");
        vec![argmax(&sums)]
    } else {
        positive.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]));
        positive.truncate(cfg.conv_channels);
        positive
    };

    let mut picked = Vec::with_capacity(channels.len());
    for c in channels {
        let best = argmax(&products[c * area..(c + 1) * area]);
        let (i, j) = (best / window.kernel_w, best % window.kernel_w);
        if let Some((y, x)) = window.source(target.y, target.x, i, j, in_shape.height, in_shape.width) {
            picked.push(SpatialLoc { channel: c, y, x });
        }
    }
    Ok(picked)
}

/// Position of the winning input of a max-pool window; the channel is kept.
pub fn backtrack_maxpool(target: SpatialLoc, layer: &PoolLayer, prev: &Tensor3) -> Result<SpatialLoc, BacktrackError> {
    let in_shape = prev.shape();
    let out_shape = layer.output_shape(in_shape).map_err(|e| BacktrackError::ShapeMismatch {
        expected: "pool input".into(),
        found: format!("{in_shape} ({e})"),
    })?;
    if target.channel >= out_shape.channels || target.y >= out_shape.height || target.x >= out_shape.width {
        return Err(BacktrackError::NodeOutOfRange {
            node: NodeLoc::Spatial(target).to_string(),
            shape: out_shape.to_string(),
        });
    }
    let window = layer.window();
    let plane = prev.channel(target.channel);
    let mut best: Option<(f32, usize, usize)> = None;
    for i in 0..window.kernel_h {
        for j in 0..window.kernel_w {
            let (y, x) = window
                .source(target.y, target.x, i, j, in_shape.height, in_shape.width)
                .expect("pool windows never touch padding");
            let v = plane[y * in_shape.width + x];
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, y, x));
            }
        }
    }
    let (_, y, x) = best.expect("non-empty window");
    Ok(SpatialLoc {
        channel: target.channel,
        y,
        x,
    })
}

/// Identity on locations; `None` when the node's recorded relu output is
/// not positive.
pub fn backtrack_relu(target: NodeLoc, relu_output: &Activation) -> Option<NodeLoc> {
    let value = match (target, relu_output) {
        (NodeLoc::Flat(i), Activation::Flat(t)) => t.data()[i],
        (NodeLoc::Spatial(s), Activation::Spatial(t)) => t.at(s.channel, s.y, s.x),
        _ => panic!("node {target} does not match activation {}", relu_output.shape()),
    };
    (value > 0.0).then_some(target)
}

pub fn backtrack_softmax(target: usize) -> usize {
    target
}

/// Result of a full walk from one output class down to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktrackOutcome {
    /// Important input pixels `(y, x)`, sorted row-major, duplicate-free.
    pub pixels: Vec<(usize, usize)>,
    /// `frontiers[k]` holds the selected nodes of trace entry `k`.
    pub frontiers: Vec<MemoryVector>,
    /// Nodes dropped at relu layers because their output was zero.
    pub dropped_relu: usize,
    /// Layer index at which the frontier became empty, if it did.
    pub dead_at: Option<usize>,
}

impl BacktrackOutcome {
    /// Spatial nodes reached right below the flatten layer, with the shape
    /// of that activation.
    pub fn first_fc_nodes(&self, net: &NetworkSpec) -> Option<(Shape3, Vec<SpatialLoc>)> {
        let idx = net.layers().iter().position(|l| matches!(l, Layer::Flatten))?;
        let ActShape::Spatial(shape) = net.shapes()[idx] else {
            return None;
        };
        let nodes = self.frontiers[idx]
            .nodes()
            .iter()
            .filter_map(|n| match n {
                NodeLoc::Spatial(s) => Some(*s),
                NodeLoc::Flat(_) => None,
            })
            .collect();
        Some((shape, nodes))
    }
}

/// Walks `trace` from class `start` back to the input pixels.
pub fn backtrack_full(
    net: &NetworkSpec,
    trace: &ActivationTrace,
    start: usize,
    cfg: &BacktrackConfig,
) -> Result<BacktrackOutcome, BacktrackError> {
    cfg.validate()?;
    check_trace(net, trace)?;
    if start >= net.num_classes() {
        return Err(BacktrackError::BadClass {
            class: start,
            classes: net.num_classes(),
        });
    }
    let layers = net.layers();
    let mut frontiers: Vec<MemoryVector> = (0..trace.len()).map(MemoryVector::new).collect();
    frontiers[layers.len()].insert(NodeLoc::Flat(start));
    let mut dropped_relu = 0;
    let mut dead_at = None;

    for (l, layer) in layers.iter().enumerate().rev() {
        let (lower, upper) = frontiers.split_at_mut(l + 1);
        let (m1, m2) = (&upper[0], &mut lower[l]);
        let prev = trace.get(l);
        for &node in m1.nodes() {
            match (layer, node) {
                (Layer::Softmax, NodeLoc::Flat(k)) => {
                    m2.insert(NodeLoc::Flat(backtrack_softmax(k)));
                }
                (Layer::Dense(d), NodeLoc::Flat(k)) => {
                    let prev = prev.as_flat().expect("checked trace");
                    for j in backtrack_fc(k, d, prev, cfg)? {
                        m2.insert(NodeLoc::Flat(j));
                    }
                }
                (Layer::Flatten, NodeLoc::Flat(k)) => {
                    let shape = prev.as_spatial().expect("checked trace").shape();
                    m2.insert(NodeLoc::Spatial(backtrack_first_fc(k, shape)?));
                }
                (Layer::Relu, n) => match backtrack_relu(n, trace.get(l + 1)) {
                    Some(n) => {
                        m2.insert(n);
                    }
                    None => dropped_relu += 1,
                },
                (Layer::Conv(c), NodeLoc::Spatial(s)) => {
                    let prev = prev.as_spatial().expect("checked trace");
                    for p in backtrack_conv(s, c, prev, cfg)? {
                        m2.insert(NodeLoc::Spatial(p));
                    }
                }
                (Layer::MaxPool(p), NodeLoc::Spatial(s)) => {
                    let prev = prev.as_spatial().expect("checked trace");
                    m2.insert(NodeLoc::Spatial(backtrack_maxpool(s, p, prev)?));
                }
                (layer, node) => unreachable!("node {node} cannot belong to the output of {}", layer.kind()),
            }
        }
        log::debug!("layer {l} ({}): frontier {} -> {}", layer.kind(), m1.len(), m2.len());
        if m2.is_empty() {
            log::debug!("backtracking frontier died at layer {l} ({})", layer.kind());
            dead_at = Some(l);
            break;
        }
    }
    if dropped_relu > 0 {
        log::debug!("{dropped_relu} node(s) dropped at relu layers with zero activation");
    }

    let pixels: BTreeSet<(usize, usize)> = frontiers[0]
        .nodes()
        .iter()
        .filter_map(|n| match n {
            NodeLoc::Spatial(s) => Some((s.y, s.x)),
            NodeLoc::Flat(_) => None,
        })
        .collect();
    Ok(BacktrackOutcome {
        pixels: pixels.into_iter().collect(),
        frontiers,
        dropped_relu,
        dead_at,
    })
}

fn check_trace(net: &NetworkSpec, trace: &ActivationTrace) -> Result<(), BacktrackError> {
    if trace.len() != net.shapes().len() {
        return Err(BacktrackError::TraceMismatch(format!(
            "{} entries for {} layers",
            trace.len(),
            net.layers().len()
        )));
    }
    for (k, (entry, expected)) in trace.entries().iter().zip(net.shapes()).enumerate() {
        if entry.shape() != *expected {
            return Err(BacktrackError::TraceMismatch(format!(
                "entry {k} is {}, expected {expected}",
                entry.shape()
            )));
        }
    }
    Ok(())
}

/// Important pixels as exchanged between tools:
/// `{"width":W,"height":H,"pixels":[[y,x],...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelList {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[usize; 2]>,
}

impl PixelList {
    pub fn new(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        Self {
            width,
            height,
            pixels: pixels.iter().map(|&(y, x)| [y, x]).collect(),
        }
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        self.pixels.iter().map(|p| (p[0], p[1])).collect()
    }
}
