//! Python bindings: load models, classify, backtrack, render saliency and
//! score masks from Python.

use std::path::PathBuf;

use cnnbtrk_core::backtrack::{backtrack_full, BacktrackConfig, BiasMode, SpatialLoc};
use cnnbtrk_core::eval::{self, confusion_counts, BinaryMask, EvalOptions};
use cnnbtrk_core::fixtures;
use cnnbtrk_core::model_io::{self, load_model, preprocess, save_model, ModelError, PreprocessSpec};
use cnnbtrk_core::network::NetworkSpec;
use cnnbtrk_core::saliency::{self, PixelRect, SaliencyConfig};
use cnnbtrk_core::selftest::run_selftest;
use cnnbtrk_core::tensor::{Shape3, Tensor3};
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_err(e: ModelError) -> PyErr {
    match e {
        ModelError::NotFound(_) => PyFileNotFoundError::new_err(e.to_string()),
        ModelError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn image_err(e: model_io::ImageError) -> PyErr {
    match e {
        model_io::ImageError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

type Rect = (usize, usize, usize, usize);

fn rect(r: PixelRect) -> Rect {
    (r.y_min, r.x_min, r.y_max, r.x_max)
}

/// Backtracking options. `None` for `top_n` or `conv_channels` means "all".
#[pyclass(name = "BacktrackConfig", module = "cnnbtrk")]
struct PyBacktrackConfig {
    inner: BacktrackConfig,
}

#[pymethods]
impl PyBacktrackConfig {
    #[new]
    #[pyo3(signature = (top_n = Some(10), conv_channels = Some(1), broadcast_bias = false))]
    fn new(top_n: Option<usize>, conv_channels: Option<usize>, broadcast_bias: bool) -> PyResult<Self> {
        let inner = BacktrackConfig {
            top_n_fc: top_n,
            conv_channels: conv_channels.unwrap_or(usize::MAX),
            bias: if broadcast_bias { BiasMode::Broadcast } else { BiasMode::Exclude },
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn top_n(&self) -> Option<usize> {
        self.inner.top_n_fc
    }

    #[getter]
    fn conv_channels(&self) -> Option<usize> {
        (self.inner.conv_channels != usize::MAX).then_some(self.inner.conv_channels)
    }

    #[getter]
    fn broadcast_bias(&self) -> bool {
        self.inner.bias == BiasMode::Broadcast
    }

    fn __repr__(&self) -> String {
        format!(
            "BacktrackConfig(top_n={:?}, conv_channels={:?}, broadcast_bias={})",
            self.top_n(),
            self.conv_channels(),
            self.broadcast_bias()
        )
    }
}

#[pyclass(name = "SaliencyConfig", module = "cnnbtrk")]
struct PySaliencyConfig {
    inner: SaliencyConfig,
}

#[pymethods]
impl PySaliencyConfig {
    #[new]
    #[pyo3(signature = (sigma = 10.0, threshold = 0.3))]
    fn new(sigma: f64, threshold: f64) -> PyResult<Self> {
        let inner = SaliencyConfig { sigma, threshold };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    fn __repr__(&self) -> String {
        format!("SaliencyConfig(sigma={}, threshold={})", self.inner.sigma, self.inner.threshold)
    }
}

fn bcfg(c: Option<PyRef<'_, PyBacktrackConfig>>) -> BacktrackConfig {
    c.map(|c| c.inner).unwrap_or_default()
}

fn scfg(c: Option<PyRef<'_, PySaliencyConfig>>) -> SaliencyConfig {
    c.map(|c| c.inner).unwrap_or_default()
}

/// Outcome of one backtracking walk.
#[pyclass(name = "BacktrackResult", module = "cnnbtrk", get_all)]
struct PyBacktrackResult {
    /// Important input pixels `(y, x)`, row-major.
    pixels: Vec<(usize, usize)>,
    class_index: usize,
    predicted: usize,
    dropped_relu: usize,
    dead_at: Option<usize>,
    /// Shape `(c, h, w)` of the last spatial map before flatten.
    grid: Option<(usize, usize, usize)>,
    /// Nodes `(c, y, x)` of that map selected by the first FC layer.
    grid_nodes: Vec<(usize, usize, usize)>,
}

#[pymethods]
impl PyBacktrackResult {
    fn __repr__(&self) -> String {
        format!(
            "BacktrackResult(class_index={}, predicted={}, pixels={})",
            self.class_index,
            self.predicted,
            self.pixels.len()
        )
    }
}

#[pyclass(name = "Network", module = "cnnbtrk")]
struct PyNetwork {
    net: NetworkSpec,
    pre: PreprocessSpec,
}

impl PyNetwork {
    fn tensor(&self, values: Vec<f32>) -> PyResult<Tensor3> {
        Tensor3::from_vec(self.net.input_shape(), values).map_err(value_err)
    }

    fn image(&self, path: PathBuf) -> PyResult<Tensor3> {
        let raw = model_io::load_image(&path).map_err(image_err)?;
        preprocess(&raw, &self.pre).map_err(value_err)
    }

    fn walk(&self, input: &Tensor3, class_index: Option<usize>, cfg: BacktrackConfig) -> PyResult<PyBacktrackResult> {
        let (trace, predicted) = self.net.forward_with_trace(input).map_err(value_err)?;
        let class_index = class_index.unwrap_or(predicted);
        let out = backtrack_full(&self.net, &trace, class_index, &cfg).map_err(value_err)?;
        let (grid, grid_nodes) = match out.first_fc_nodes(&self.net) {
            Some((s, nodes)) => (
                Some((s.channels, s.height, s.width)),
                nodes.iter().map(|n| (n.channel, n.y, n.x)).collect(),
            ),
            None => (None, Vec::new()),
        };
        Ok(PyBacktrackResult {
            pixels: out.pixels,
            class_index,
            predicted,
            dropped_relu: out.dropped_relu,
            dead_at: out.dead_at,
            grid,
            grid_nodes,
        })
    }
}

#[pymethods]
impl PyNetwork {
    /// Loads a `CNNBTRK1` model file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, pre) = load_model(&path).map_err(model_err)?;
        Ok(Self { net, pre })
    }

    /// Toy network whose decision traces back to the single brightest pixel.
    #[staticmethod]
    #[pyo3(signature = (size = 8))]
    fn bright_pixel(size: usize) -> PyResult<Self> {
        if size < 2 || !size.is_multiple_of(2) {
            return Err(PyValueError::new_err("size must be even and at least 2"));
        }
        Ok(Self {
            net: fixtures::bright_pixel_network(3, size),
            pre: fixtures::bright_pixel_preprocess(size),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.net, &self.pre).map_err(model_err)
    }

    /// `(channels, height, width)` expected by the first layer.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.net.input_shape();
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn class_labels(&self) -> Vec<String> {
        self.net.class_labels().to_vec()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.net.layers().len()
    }

    /// Softmax scores for a preprocessed channel-major input.
    fn forward(&self, values: Vec<f32>) -> PyResult<Vec<f32>> {
        let (trace, _) = self.net.forward_with_trace(&self.tensor(values)?).map_err(value_err)?;
        Ok(trace.output().data().to_vec())
    }

    /// Top classes of a PPM image as `(index, label, score)`, best first.
    #[pyo3(signature = (image, top = 5))]
    fn classify(&self, image: PathBuf, top: usize) -> PyResult<Vec<(usize, String, f32)>> {
        let (trace, _) = self.net.forward_with_trace(&self.image(image)?).map_err(value_err)?;
        let probs = trace.output().data();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(top)
            .map(|i| (i, self.net.class_labels()[i].clone(), probs[i]))
            .collect())
    }

    /// Backtracks a PPM image from `class_index` (default: the prediction).
    #[pyo3(signature = (image, class_index = None, config = None))]
    fn backtrack(
        &self,
        image: PathBuf,
        class_index: Option<usize>,
        config: Option<PyRef<'_, PyBacktrackConfig>>,
    ) -> PyResult<PyBacktrackResult> {
        let input = self.image(image)?;
        self.walk(&input, class_index, bcfg(config))
    }

    /// Same as `backtrack` for a preprocessed channel-major input.
    #[pyo3(signature = (values, class_index = None, config = None))]
    fn backtrack_values(
        &self,
        values: Vec<f32>,
        class_index: Option<usize>,
        config: Option<PyRef<'_, PyBacktrackConfig>>,
    ) -> PyResult<PyBacktrackResult> {
        let input = self.tensor(values)?;
        self.walk(&input, class_index, bcfg(config))
    }

    /// Runs the dataset evaluation and returns the report as a dict.
    #[pyo3(signature = (dataset, backtrack = None, saliency = None, jobs = 0, strict = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: PathBuf,
        backtrack: Option<PyRef<'_, PyBacktrackConfig>>,
        saliency: Option<PyRef<'_, PySaliencyConfig>>,
        jobs: usize,
        strict: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (b, s) = (bcfg(backtrack), scfg(saliency));
        let opts = EvalOptions { strict, jobs };
        let report = py
            .detach(|| eval::dataset_run(&self.net, &self.pre, &dataset, &b, &s, &opts))
            .map_err(value_err)?;
        let text = serde_json::to_string(&report).map_err(value_err)?;
        py.import("json")?.call_method1("loads", (text,))
    }

    fn __repr__(&self) -> String {
        let s = self.net.input_shape();
        format!(
            "Network(input=({}, {}, {}), layers={}, classes={})",
            s.channels,
            s.height,
            s.width,
            self.net.layers().len(),
            self.net.num_classes()
        )
    }
}

/// Gaussian density field and thresholded mask.
#[pyclass(name = "SaliencyMap", module = "cnnbtrk")]
struct PySaliencyMap {
    inner: saliency::SaliencyMap,
}

#[pymethods]
impl PySaliencyMap {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Row-major field values in `[0, 1]`.
    #[getter]
    fn field(&self) -> Vec<f64> {
        self.inner.field.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.inner.mask.clone()
    }

    fn value(&self, y: usize, x: usize) -> PyResult<f64> {
        if y >= self.inner.height || x >= self.inner.width {
            return Err(PyValueError::new_err(format!("({y}, {x}) outside the map")));
        }
        Ok(self.inner.value(y, x))
    }

    /// Binary PPM of the attention heatmap.
    fn heatmap_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        let img = saliency::attention_heatmap(&self.inner);
        PyBytes::new(py, &cnnbtrk_core::pnm::encode_ppm(img.width, img.height, &img.data))
    }

    /// Binary PGM of the field scaled to 0..255.
    fn field_pgm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &cnnbtrk_core::pnm::encode_pgm(self.inner.width, self.inner.height, &self.inner.field_gray()))
    }

    /// Binary PGM of the mask with values 0 and 255.
    fn mask_pgm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &cnnbtrk_core::pnm::encode_pgm(self.inner.width, self.inner.height, &self.inner.mask_gray()))
    }
}

/// Splats a Gaussian on every pixel `(y, x)` of a `width`×`height` canvas.
#[pyfunction]
#[pyo3(signature = (pixels, width, height, config = None))]
fn splat(
    pixels: Vec<(usize, usize)>,
    width: usize,
    height: usize,
    config: Option<PyRef<'_, PySaliencyConfig>>,
) -> PyResult<PySaliencyMap> {
    let inner = saliency::splat_gaussian(&pixels, width, height, &scfg(config)).map_err(value_err)?;
    Ok(PySaliencyMap { inner })
}

/// Image box `(y_min, x_min, y_max, x_max)`, inclusive, covered by a node of a coarse grid.
#[pyfunction]
fn coarse_project(
    node: (usize, usize, usize),
    grid: (usize, usize, usize),
    image_width: usize,
    image_height: usize,
) -> PyResult<Rect> {
    let shape = Shape3::new(grid.0, grid.1, grid.2).map_err(value_err)?;
    let loc = SpatialLoc {
        channel: node.0,
        y: node.1,
        x: node.2,
    };
    saliency::coarse_project(loc, shape, image_width, image_height)
        .map(rect)
        .map_err(value_err)
}

#[pyfunction]
fn bounding_box(pixels: Vec<(usize, usize)>) -> Option<Rect> {
    saliency::bounding_box(&pixels).map(rect)
}

/// Pixel metrics of a predicted mask against ground truth, both row-major.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    predicted: Vec<bool>,
    truth: Vec<bool>,
    width: usize,
    height: usize,
) -> PyResult<Bound<'py, PyAny>> {
    if predicted.len() != width * height || truth.len() != width * height {
        return Err(PyValueError::new_err(format!("masks must have {} entries", width * height)));
    }
    let c = confusion_counts(&BinaryMask::new(width, height, predicted), &BinaryMask::new(width, height, truth))
        .map_err(value_err)?;
    let text = serde_json::to_string(&eval::metrics(&c)).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Reads a binary PPM or PGM as `((channels, height, width), values)` with
/// values in 0..255, channel-major.
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<((usize, usize, usize), Vec<f32>)> {
    let t = model_io::load_image(&path).map_err(image_err)?;
    let s = t.shape();
    Ok(((s.channels, s.height, s.width), t.into_vec()))
}

/// Runs the oracle comparison; returns `(trials, selections, mismatches)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, trials = 100))]
fn selftest(py: Python<'_>, seed: u64, trials: usize) -> (usize, usize, usize) {
    let r = py.detach(|| run_selftest(seed, trials, false));
    (r.trials, r.selections, r.mismatches.len())
}

#[pymodule]
fn cnnbtrk(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBacktrackConfig>()?;
    m.add_class::<PySaliencyConfig>()?;
    m.add_class::<PyBacktrackResult>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PySaliencyMap>()?;
    m.add_function(wrap_pyfunction!(splat, m)?)?;
    m.add_function(wrap_pyfunction!(coarse_project, m)?)?;
    m.add_function(wrap_pyfunction!(bounding_box, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_all_maps_to_unbounded() {
        let c = PyBacktrackConfig::new(None, None, true).unwrap();
        assert_eq!(c.inner.top_n_fc, None);
        assert_eq!(c.inner.conv_channels, usize::MAX);
        assert_eq!((c.top_n(), c.conv_channels(), c.broadcast_bias()), (None, None, true));
        assert!(PyBacktrackConfig::new(Some(0), Some(1), false).is_err());
        assert!(PySaliencyConfig::new(10.0, 1.5).is_err());
    }

    #[test]
    fn toy_network_round_trip() {
        let net = PyNetwork::bright_pixel(4).unwrap();
        let mut values = vec![0.0; 3 * 16];
        for c in 0..3 {
            values[c * 16 + 2 * 4 + 3] = 1.0;
        }
        let r = net.walk(&net.tensor(values).unwrap(), None, BacktrackConfig::default()).unwrap();
        assert_eq!(r.pixels, vec![(2, 3)]);
        assert_eq!(r.grid, Some((1, 2, 2)));
        assert_eq!(r.grid_nodes, vec![(0, 1, 1)]);
        assert!(PyNetwork::bright_pixel(3).is_err());
    }

    #[test]
    fn rect_order() {
        let r = PixelRect {
            y_min: 1,
            x_min: 2,
            y_max: 3,
            x_max: 4,
        };
        assert_eq!(rect(r), (1, 2, 3, 4));
    }
}
