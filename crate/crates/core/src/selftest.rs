//! Oracle-equivalence check on random small networks.
//!
//! The oracle re-derives every backtracking selection by enumerating all
//! contribution products with plain index arithmetic over the raw layer
//! parameters and trace buffers. It shares no selection code with
//! [`crate::backtrack`].

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backtrack::{backtrack_full, BacktrackConfig, NodeLoc, SpatialLoc};
use crate::network::{ActShape, ActivationTrace, ConvLayer, DenseLayer, Layer, NetworkSpec, PoolLayer};
use crate::tensor::{Shape3, Tensor3, Window};

/// Random plain network with 2–4 weighted/pooling layers, at most 4 channels
/// and at most 8×8 spatial extent, plus a matching random input in `[0, 1)`.
pub fn random_network(rng: &mut ChaCha8Rng) -> (NetworkSpec, Tensor3) {
    let total = rng.gen_range(2..=4);
    let n_dense = rng.gen_range(1..=2.min(total));
    let n_spatial = total - n_dense;

    let input_shape = Shape3::new(rng.gen_range(1..=4), rng.gen_range(2..=8), rng.gen_range(2..=8)).expect("positive");
    let mut shape = input_shape;
    let mut layers = Vec::new();
    let uniform = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();

    for _ in 0..n_spatial {
        let can_pool = shape.height >= 2 && shape.width >= 2;
        if can_pool && rng.gen_bool(0.4) {
            let pool = PoolLayer::new(2, 2, 2).expect("valid");
            shape = pool.output_shape(shape).expect("fits");
            layers.push(Layer::MaxPool(pool));
        } else {
            let k = rng.gen_range(1..=3.min(shape.height.min(shape.width) + 2));
            let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
            let stride = rng.gen_range(1..=2);
            let mut window = Window::new(k, k, stride, pad);
            if window.output_dims(shape.height, shape.width).is_none() {
                window = Window::new(1, 1, 1, 0);
            }
            let out = rng.gen_range(1..=4);
            let weights = uniform(rng, out * shape.channels * window.kernel_h * window.kernel_w);
            let bias = uniform(rng, out);
            let conv = ConvLayer::new(shape.channels, out, window, weights, bias).expect("valid");
            shape = conv.output_shape(shape).expect("fits");
            layers.push(Layer::Conv(conv));
            if rng.gen_bool(0.7) {
                layers.push(Layer::Relu);
            }
        }
    }
    layers.push(Layer::Flatten);
    let mut dim = shape.len();
    for d in 0..n_dense {
        let out = if d + 1 == n_dense { rng.gen_range(2..=5) } else { rng.gen_range(2..=8) };
        let weights = uniform(rng, out * dim);
        let bias = uniform(rng, out);
        layers.push(Layer::Dense(DenseLayer::new(dim, out, weights, bias).expect("valid")));
        if d + 1 < n_dense {
            layers.push(Layer::Relu);
        }
        dim = out;
    }
    layers.push(Layer::Softmax);
    let labels = (0..dim).map(|i| format!("class{i}")).collect();
    let net = NetworkSpec::new(input_shape, layers, labels).expect("generator builds valid chains");
    let input = Tensor3::from_vec(input_shape, (0..input_shape.len()).map(|_| rng.gen_range(0.0f32..1.0)).collect()).expect("finite");
    (net, input)
}

fn dims(shape: ActShape) -> (usize, usize, usize) {
    match shape {
        ActShape::Spatial(s) => (s.channels, s.height, s.width),
        ActShape::Flat(n) => (n, 1, 1),
    }
}

fn oracle_dense(k: usize, d: &DenseLayer, prev: &[f32], top_n: Option<usize>) -> Vec<NodeLoc> {
    let row = &d.weights()[k * d.in_dim()..(k + 1) * d.in_dim()];
    let mut contrib: Vec<(f64, usize)> = Vec::new();
    for (j, (&w, &a)) in row.iter().zip(prev).enumerate() {
        let p = w as f64 * a as f64;
        if p > 0.0 {
            contrib.push((p, j));
        }
    }
    contrib.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let keep = top_n.unwrap_or(contrib.len()).min(contrib.len());
    contrib[..keep].iter().map(|&(_, j)| NodeLoc::Flat(j)).collect()
}

fn oracle_conv(t: SpatialLoc, conv: &ConvLayer, prev: &[f32], (c_in, h, w): (usize, usize, usize)) -> Vec<NodeLoc> {
    let win = conv.window();
    let (kh, kw) = (win.kernel_h, win.kernel_w);
    let mut best_channel = 0;
    let mut best_sum = f64::NEG_INFINITY;
    let mut best_pos: Vec<(f64, isize, isize)> = Vec::with_capacity(c_in);
    for c in 0..c_in {
        let mut sum = 0.0f64;
        let mut top = (f64::NEG_INFINITY, 0isize, 0isize);
        for i in 0..kh {
            for j in 0..kw {
                let y = (t.y * win.stride + i) as isize - win.pad as isize;
                let x = (t.x * win.stride + j) as isize - win.pad as isize;
                let a = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    prev[(c * h + y as usize) * w + x as usize]
                } else {
                    0.0
                };
                let weight = conv.weights()[((t.channel * c_in + c) * kh + i) * kw + j];
                let p = weight as f64 * a as f64;
                sum += p;
                if p > top.0 {
                    top = (p, y, x);
                }
            }
        }
        if sum > best_sum {
            best_sum = sum;
            best_channel = c;
        }
        best_pos.push(top);
    }
    let (_, y, x) = best_pos[best_channel];
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        return Vec::new();
    }
    vec![NodeLoc::Spatial(SpatialLoc::new(best_channel, y as usize, x as usize))]
}

fn oracle_pool(t: SpatialLoc, pool: &PoolLayer, prev: &[f32], (_, h, w): (usize, usize, usize)) -> NodeLoc {
    let win = pool.window();
    let mut best = (f32::NEG_INFINITY, 0, 0);
    for i in 0..win.kernel_h {
        for j in 0..win.kernel_w {
            let (y, x) = (t.y * win.stride + i, t.x * win.stride + j);
            let v = prev[(t.channel * h + y) * w + x];
            if v > best.0 {
                best = (v, y, x);
            }
        }
    }
    NodeLoc::Spatial(SpatialLoc::new(t.channel, best.1, best.2))
}

/// Brute-force frontiers for every trace entry (index-aligned with the
/// trace). Supports one conv channel per target; `top_n` caps dense layers.
pub fn oracle_frontiers(net: &NetworkSpec, trace: &ActivationTrace, start: usize, top_n: Option<usize>) -> Vec<Vec<NodeLoc>> {
    let layers = net.layers();
    let mut frontiers = vec![Vec::new(); layers.len() + 1];
    frontiers[layers.len()] = vec![NodeLoc::Flat(start)];
    for l in (0..layers.len()).rev() {
        let prev = trace.get(l).data();
        let prev_dims = dims(net.shapes()[l]);
        let mut next: Vec<NodeLoc> = Vec::new();
        let mut push = |n: NodeLoc| {
            if !next.contains(&n) {
                next.push(n);
            }
        };
        for &node in &frontiers[l + 1] {
            match (&layers[l], node) {
                (Layer::Softmax, n) => push(n),
                (Layer::Dense(d), NodeLoc::Flat(k)) => oracle_dense(k, d, prev, top_n).into_iter().for_each(&mut push),
                (Layer::Flatten, NodeLoc::Flat(i)) => {
                    let (_, h, w) = prev_dims;
                    push(NodeLoc::Spatial(SpatialLoc::new(i / (h * w), (i % (h * w)) / w, i % w)));
                }
                (Layer::Relu, n) => {
                    let out = trace.get(l + 1).data();
                    let (_, h, w) = dims(net.shapes()[l + 1]);
                    let v = match n {
                        NodeLoc::Flat(i) => out[i],
                        NodeLoc::Spatial(s) => out[(s.channel * h + s.y) * w + s.x],
                    };
                    if v > 0.0 {
                        push(n);
                    }
                }
                (Layer::Conv(c), NodeLoc::Spatial(s)) => oracle_conv(s, c, prev, prev_dims).into_iter().for_each(&mut push),
                (Layer::MaxPool(p), NodeLoc::Spatial(s)) => push(oracle_pool(s, p, prev, prev_dims)),
                (layer, n) => panic!("oracle: node {n} cannot feed {}", layer.kind()),
            }
        }
        if next.is_empty() {
            break;
        }
        frontiers[l] = next;
    }
    frontiers
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub trial: usize,
    pub trace_index: usize,
    pub layer: String,
    pub expected: Vec<String>,
    pub actual: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub trials: usize,
    /// Layer-wise selections compared.
    pub selections: usize,
    pub mismatches: Vec<Mismatch>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares the implementation against the oracle on one network and
/// returns `(selections compared, mismatches)`.
pub fn compare_one(
    trial: usize,
    net: &NetworkSpec,
    trace: &ActivationTrace,
    start: usize,
    top_n: Option<usize>,
    inject_fault: bool,
) -> (usize, Vec<Mismatch>) {
    let cfg = BacktrackConfig {
        top_n_fc: top_n,
        conv_channels: 1,
        ..Default::default()
    };
    let outcome = backtrack_full(net, trace, start, &cfg).expect("valid trace");
    let mut actual: Vec<Vec<NodeLoc>> = outcome.frontiers.iter().map(|m| m.nodes().to_vec()).collect();
    if inject_fault {
        // perturb the deepest non-empty frontier below the output
        let below_output = actual.len() - 1;
        if let Some(f) = actual[..below_output].iter_mut().find(|f| !f.is_empty()) {
            f.pop();
        }
    }
    let expected = oracle_frontiers(net, trace, start, top_n);
    let mut mismatches = Vec::new();
    for (k, (e, a)) in expected.iter().zip(&actual).enumerate() {
        if e != a {
            let layer = if k < net.layers().len() { net.layers()[k].kind() } else { "output" };
            mismatches.push(Mismatch {
                trial,
                trace_index: k,
                layer: format!("input of layer {k} ({layer})"),
                expected: e.iter().map(ToString::to_string).collect(),
                actual: a.iter().map(ToString::to_string).collect(),
            });
        }
    }
    (expected.len(), mismatches)
}

/// Runs `trials` independent random networks derived from `seed`.
pub fn run_selftest(seed: u64, trials: usize, inject_fault: bool) -> SelftestReport {
    let started = Instant::now();
    let mut selections = 0;
    let mut mismatches = Vec::new();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let (net, input) = random_network(&mut rng);
        let (trace, predicted) = net.forward_with_trace(&input).expect("generated network runs");
        let start = if rng.gen_bool(0.5) { predicted } else { rng.gen_range(0..net.num_classes()) };
        let top_n = [Some(1), Some(3), None][rng.gen_range(0..3)];
        let (n, m) = compare_one(trial, &net, &trace, start, top_n, inject_fault);
        selections += n;
        mismatches.extend(m);
    }
    SelftestReport {
        seed,
        trials,
        selections,
        mismatches,
        elapsed: started.elapsed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (net, input) = random_network(&mut rng);
            let weighted = net
                .layers()
                .iter()
                .filter(|l| matches!(l, Layer::Conv(_) | Layer::MaxPool(_) | Layer::Dense(_)))
                .count();
            assert!((2..=4).contains(&weighted));
            assert!(net.layers().iter().any(|l| matches!(l, Layer::Dense(_))));
            for s in net.shapes() {
                if let ActShape::Spatial(s) = s {
                    assert!(s.channels <= 4 && s.height <= 8 && s.width <= 8);
                }
            }
            assert_eq!(input.shape(), net.input_shape());
        }
    }

    #[test]
    fn clean_run_passes_and_fault_is_caught() {
        assert!(run_selftest(42, 25, false).passed());
        assert!(!run_selftest(42, 25, true).passed());
    }
}
