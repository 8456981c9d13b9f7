//! Pixel-level saliency metrics and dataset evaluation.
//!
//! A dataset directory holds `images/<name>.ppm` and `masks/<name>.pgm`,
//! paired by file stem. Ground-truth masks are binarised at `> 127`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtrack::{backtrack_full, BacktrackConfig};
use crate::model_io::{load_image, preprocess, PreprocessSpec};
use crate::network::NetworkSpec;
use crate::pnm;
use crate::saliency::{splat_gaussian, SaliencyConfig};

/// β² of the weighted F-measure customary for salient-object benchmarks.
pub const SALIENCY_BETA2: f64 = 0.3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask size {pred_w}x{pred_h} does not match ground truth {gt_w}x{gt_h}")]
    DimMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("no samples in {0}")]
    NoSamples(String),
    #[error("cannot read dataset directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} sample(s) skipped in strict mode: {1}")]
    Strict(usize, String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size");
        Self { width, height, data }
    }

    /// Binarises an 8-bit gray raster at `> 127`.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Self {
        Self::new(width, height, gray.iter().map(|&v| v > 127).collect())
    }

    pub fn load_pgm(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let r = pnm::decode_pgm(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::from_gray(r.width, r.height, &r.data))
    }

    /// Nearest-neighbour resample using pixel-centre alignment.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let pick = |dst: usize, n_in: usize, n_out: usize| (((2 * dst + 1) * n_in) / (2 * n_out)).min(n_in - 1);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = pick(y, self.height, height);
            for x in 0..width {
                data.push(self.data[sy * self.width + pick(x, self.width, width)]);
            }
        }
        Self::new(width, height, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion, EvalError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(EvalError::DimMismatch {
            pred_w: pred.width,
            pred_h: pred.height,
            gt_w: gt.width,
            gt_h: gt.height,
        });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Weighted harmonic mean `(1+β²)PR / (β²P + R)`; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Fβ with β² = 0.3.
    pub f_score: f64,
    pub iou: f64,
    /// Plain harmonic F1.
    pub f_beta_1: f64,
    /// Metrics whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn metrics(c: &Confusion) -> Metrics {
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio("accuracy", c.tp + c.tn, c.total());
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    let recall = ratio("recall", c.tp, c.tp + c.fn_);
    let iou = ratio("iou", c.tp, c.tp + c.fp + c.fn_);
    Metrics {
        accuracy,
        precision,
        recall,
        f_score: f_beta(precision, recall, SALIENCY_BETA2),
        iou,
        f_beta_1: f_beta(precision, recall, 1.0),
        undefined,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub iou: f64,
    pub f_beta_1: f64,
}

impl MeanMetrics {
    /// Arithmetic mean of per-image metrics, summed in index order.
    pub fn of<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let mut sum = MeanMetrics::default();
        let mut n = 0usize;
        for m in items {
            sum.accuracy += m.accuracy;
            sum.precision += m.precision;
            sum.recall += m.recall;
            sum.f_score += m.f_score;
            sum.iou += m.iou;
            sum.f_beta_1 += m.f_beta_1;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        MeanMetrics {
            accuracy: sum.accuracy / n,
            precision: sum.precision / n,
            recall: sum.recall / n,
            f_score: sum.f_score / n,
            iou: sum.iou / n,
            f_beta_1: sum.f_beta_1 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub predicted_class: usize,
    pub important_pixels: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sigma: f64,
    pub threshold: f64,
    pub images: Vec<ImageRecord>,
    pub mean: MeanMetrics,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Fail when any sample had to be skipped.
    pub strict: bool,
    /// Worker threads; 0 means available parallelism.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>, EvalError> {
    let mut out = BTreeMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(source) => {
            return Err(EvalError::Io {
                path: dir.display().to_string(),
                source,
            })
        }
    };
    for entry in entries {
        let path = entry
            .map_err(|source| EvalError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs `images/*.ppm` with `masks/*.pgm` by stem, sorted by name.
/// Unpaired files are returned as skipped.
pub fn discover(dir: &Path) -> Result<(Vec<Sample>, Vec<Skipped>), EvalError> {
    if !dir.is_dir() {
        return Err(EvalError::Io {
            path: dir.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let images = stems(&dir.join("images"), "ppm")?;
    let mut masks = stems(&dir.join("masks"), "pgm")?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (name, image) in images {
        match masks.remove(&name) {
            Some(mask) => samples.push(Sample { name, image, mask }),
            None => skipped.push(Skipped {
                name,
                reason: "no matching mask".into(),
            }),
        }
    }
    skipped.extend(masks.into_keys().map(|name| Skipped {
        name,
        reason: "no matching image".into(),
    }));
    skipped.sort_by(|a, b| a.name.cmp(&b.name));
    if samples.is_empty() && skipped.is_empty() {
        return Err(EvalError::NoSamples(dir.display().to_string()));
    }
    Ok((samples, skipped))
}

/// Saliency-independent part of the per-image pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub name: String,
    pub predicted_class: usize,
    /// Important pixels in network-input coordinates.
    pub pixels: Vec<(usize, usize)>,
    pub gt: BinaryMask,
}

/// Loads one pair and runs forward pass + backtracking from the predicted class.
pub fn prepare_sample(
    net: &NetworkSpec,
    pre: &PreprocessSpec,
    sample: &Sample,
    bcfg: &BacktrackConfig,
) -> Result<PreparedSample, String> {
    let img = load_image(&sample.image).map_err(|e| e.to_string())?;
    let gt = BinaryMask::load_pgm(&sample.mask)?;
    let s = img.shape();
    if gt.width != s.width || gt.height != s.height {
        return Err(format!(
            "mask {}x{} does not match image {}x{}",
            gt.width, gt.height, s.width, s.height
        ));
    }
    let input = preprocess(&img, pre).map_err(|e| e.to_string())?;
    let (trace, predicted_class) = net.forward_with_trace(&input).map_err(|e| e.to_string())?;
    let outcome = backtrack_full(net, &trace, predicted_class, bcfg).map_err(|e| e.to_string())?;
    Ok(PreparedSample {
        name: sample.name.clone(),
        predicted_class,
        pixels: outcome.pixels,
        gt,
    })
}

/// Splats the pixels at network resolution, thresholds, resamples the mask
/// to the ground-truth size and scores it.
pub fn score_pixels(
    pixels: &[(usize, usize)],
    net_w: usize,
    net_h: usize,
    gt: &BinaryMask,
    scfg: &SaliencyConfig,
) -> Result<Metrics, EvalError> {
    let map = splat_gaussian(pixels, net_w, net_h, scfg).map_err(|e| EvalError::Config(e.to_string()))?;
    let pred = BinaryMask::new(net_w, net_h, map.mask).resize_nearest(gt.width, gt.height);
    Ok(metrics(&confusion_counts(&pred, gt)?))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))
}

/// Runs the saliency-independent pipeline over a dataset, in name order.
pub fn prepare_dataset(
    net: &NetworkSpec,
    pre: &PreprocessSpec,
    dir: &Path,
    bcfg: &BacktrackConfig,
    opts: &EvalOptions,
) -> Result<(Vec<PreparedSample>, Vec<Skipped>), EvalError> {
    bcfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let (samples, mut skipped) = discover(dir)?;
    let results: Vec<_> = pool(opts.jobs)?.install(|| {
        samples
            .par_iter()
            .map(|s| prepare_sample(net, pre, s, bcfg).map_err(|reason| Skipped {
                name: s.name.clone(),
                reason,
            }))
            .collect()
    });
    let mut prepared = Vec::new();
    for r in results {
        match r {
            Ok(p) => prepared.push(p),
            Err(s) => {
                log::warn!("skipping {}: {}", s.name, s.reason);
                skipped.push(s);
            }
        }
    }
    skipped.sort_by(|a, b| a.name.cmp(&b.name));
    if opts.strict && !skipped.is_empty() {
        let names: Vec<_> = skipped.iter().map(|s| format!("{} ({})", s.name, s.reason)).collect();
        return Err(EvalError::Strict(skipped.len(), names.join(", ")));
    }
    if prepared.is_empty() {
        return Err(EvalError::NoSamples(dir.display().to_string()));
    }
    Ok((prepared, skipped))
}

/// Scores prepared samples under one saliency configuration.
pub fn score_dataset(
    net: &NetworkSpec,
    prepared: &[PreparedSample],
    skipped: &[Skipped],
    scfg: &SaliencyConfig,
) -> Result<MetricsReport, EvalError> {
    scfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let s = net.input_shape();
    let images = prepared
        .par_iter()
        .map(|p| {
            Ok(ImageRecord {
                name: p.name.clone(),
                predicted_class: p.predicted_class,
                important_pixels: p.pixels.len(),
                metrics: score_pixels(&p.pixels, s.width, s.height, &p.gt, scfg)?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(MetricsReport {
        sigma: scfg.sigma,
        threshold: scfg.threshold,
        mean: MeanMetrics::of(images.iter().map(|r| &r.metrics)),
        images,
        skipped: skipped.to_vec(),
    })
}

/// forward → backtrack → saliency → metrics for every pair in `dir`.
pub fn dataset_run(
    net: &NetworkSpec,
    pre: &PreprocessSpec,
    dir: &Path,
    bcfg: &BacktrackConfig,
    scfg: &SaliencyConfig,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    scfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let (prepared, skipped) = prepare_dataset(net, pre, dir, bcfg, opts)?;
    pool(opts.jobs)?.install(|| score_dataset(net, &prepared, &skipped, scfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub sigma: f64,
    pub threshold: f64,
    pub mean: MeanMetrics,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Full report of the row with the highest mean F-score.
    pub best: MetricsReport,
}

/// Evaluates every `(sigma, threshold)` pair (sigma-major order) and marks
/// the one with the highest mean F-score; earlier rows win ties.
pub fn grid_search(
    net: &NetworkSpec,
    pre: &PreprocessSpec,
    dir: &Path,
    bcfg: &BacktrackConfig,
    sigmas: &[f64],
    thresholds: &[f64],
    opts: &EvalOptions,
) -> Result<GridReport, EvalError> {
    if sigmas.is_empty() || thresholds.is_empty() {
        return Err(EvalError::Config("grid search needs at least one sigma and one threshold".into()));
    }
    let configs: Vec<SaliencyConfig> = sigmas
        .iter()
        .flat_map(|&sigma| thresholds.iter().map(move |&threshold| SaliencyConfig { sigma, threshold }))
        .collect();
    for c in &configs {
        c.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    }
    let (prepared, skipped) = prepare_dataset(net, pre, dir, bcfg, opts)?;
    let reports = pool(opts.jobs)?.install(|| {
        configs
            .iter()
            .map(|c| score_dataset(net, &prepared, &skipped, c))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.mean.f_score > reports[best].mean.f_score {
            best = i;
        }
    }
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| GridRow {
            sigma: r.sigma,
            threshold: r.threshold,
            mean: r.mean,
            best: i == best,
        })
        .collect();
    Ok(GridReport {
        rows,
        best: reports.into_iter().nth(best).expect("non-empty"),
    })
}
