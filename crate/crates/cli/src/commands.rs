use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use cnnbtrk_core::backtrack::{backtrack_full, BacktrackConfig, PixelList, SpatialLoc};
use cnnbtrk_core::eval::{self, EvalOptions};
use cnnbtrk_core::model_io::{load_image, load_model, preprocess, PreprocessSpec};
use cnnbtrk_core::network::NetworkSpec;
use cnnbtrk_core::pnm::{encode_pgm, encode_ppm};
use cnnbtrk_core::saliency::{attention_heatmap, bounding_box, coarse_project, splat_gaussian, PixelRect, SaliencyConfig};
use cnnbtrk_core::selftest::run_selftest;
use cnnbtrk_core::tensor::{Shape3, Tensor3};
use log::{info, warn};
use serde::Serialize;

/// Exit status 2: the user's input was wrong. Exit status 1: an internal
/// invariant failed.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Internal(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Internal(e) => e,
        }
    }
}

trait ResultExt<T> {
    fn input(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

fn load_input(image: &Path, pre: &PreprocessSpec) -> Result<Tensor3, Failure> {
    let raw = load_image(image).input()?;
    preprocess(&raw, pre)
        .with_context(|| format!("cannot preprocess {}", image.display()))
        .input()
}

#[derive(Debug, Serialize)]
struct ClassScore {
    rank: usize,
    index: usize,
    label: String,
    score: f32,
}

#[derive(Debug, Serialize)]
struct Classification {
    classes: Vec<ClassScore>,
}

fn top_classes(net: &NetworkSpec, probs: &[f32], k: usize) -> Vec<ClassScore> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, index)| ClassScore {
            rank: rank + 1,
            index,
            label: net.class_labels()[index].clone(),
            score: probs[index],
        })
        .collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(value).internal()?;
    println!("{s}");
    Ok(())
}

pub fn classify(model: &Path, image: &Path, json: bool) -> Result<(), Failure> {
    let (net, pre) = load_model(model).input()?;
    let input = load_input(image, &pre)?;
    let (trace, _) = net.forward_with_trace(&input).internal()?;
    let classes = top_classes(&net, trace.output().data(), 5);
    if json {
        return print_json(&Classification { classes });
    }
    let width = classes.iter().map(|c| c.label.len()).max().unwrap_or(0);
    for c in &classes {
        println!("{}. {:<width$}  [{:>4}]  {:.6}", c.rank, c.label, c.index, c.score);
    }
    Ok(())
}

pub struct BacktrackRun<'a> {
    pub model: &'a Path,
    pub image: &'a Path,
    pub out_dir: &'a Path,
    pub class: Option<usize>,
    pub bcfg: BacktrackConfig,
    pub scfg: SaliencyConfig,
    pub json: bool,
}

#[derive(Debug, Serialize)]
struct CoarseBox {
    node: SpatialLoc,
    rect: PixelRect,
}

#[derive(Debug, Serialize)]
struct BoxReport {
    class: usize,
    label: String,
    width: usize,
    height: usize,
    bbox: Option<PixelRect>,
    grid: Option<Shape3>,
    coarse_boxes: Vec<CoarseBox>,
}

#[derive(Debug, Serialize)]
struct BacktrackSummary {
    class: usize,
    label: String,
    predicted: usize,
    pixels: usize,
    masked: usize,
    dropped_relu: usize,
    dead_at: Option<usize>,
    files: Vec<String>,
}

pub const ARTIFACTS: [&str; 5] = ["pixels.json", "saliency.pgm", "mask.pgm", "heatmap.ppm", "bbox.json"];

pub fn backtrack(run: &BacktrackRun) -> Result<(), Failure> {
    run.bcfg.validate().input()?;
    run.scfg.validate().input()?;
    let (net, pre) = load_model(run.model).input()?;
    let input = load_input(run.image, &pre)?;
    let (trace, predicted) = net.forward_with_trace(&input).internal()?;
    let class = run.class.unwrap_or(predicted);
    if class >= net.num_classes() {
        return Err(Failure::Input(anyhow!(
            "class {class} out of range: model has {} classes",
            net.num_classes()
        )));
    }
    let outcome = backtrack_full(&net, &trace, class, &run.bcfg).internal()?;
    if let Some(layer) = outcome.dead_at {
        warn!("backtracking died at layer {layer}: no important pixels");
    }
    info!(
        "class {class}: {} pixels, {} nodes dropped at relu",
        outcome.pixels.len(),
        outcome.dropped_relu
    );

    let shape = net.input_shape();
    let (w, h) = (shape.width, shape.height);
    let map = splat_gaussian(&outcome.pixels, w, h, &run.scfg).internal()?;
    let heat = attention_heatmap(&map);

    let mut coarse_boxes = Vec::new();
    let mut grid = None;
    if let Some((g, nodes)) = outcome.first_fc_nodes(&net) {
        grid = Some(g);
        for node in nodes {
            let rect = coarse_project(node, g, w, h).internal()?;
            coarse_boxes.push(CoarseBox { node, rect });
        }
    }
    let boxes = BoxReport {
        class,
        label: net.class_labels()[class].clone(),
        width: w,
        height: h,
        bbox: bounding_box(&outcome.pixels),
        grid,
        coarse_boxes,
    };

    let pixels = PixelList::new(w, h, &outcome.pixels);
    let contents: [Vec<u8>; 5] = [
        json_bytes(&pixels)?,
        encode_pgm(w, h, &map.field_gray()),
        encode_pgm(w, h, &map.mask_gray()),
        encode_ppm(heat.width, heat.height, &heat.data),
        json_bytes(&boxes)?,
    ];
    fs::create_dir_all(run.out_dir)
        .with_context(|| format!("cannot create output directory {}", run.out_dir.display()))
        .input()?;
    for (name, bytes) in ARTIFACTS.iter().zip(&contents) {
        let path = run.out_dir.join(name);
        fs::write(&path, bytes)
            .with_context(|| format!("cannot write {}", path.display()))
            .input()?;
    }

    let summary = BacktrackSummary {
        class,
        label: boxes.label.clone(),
        predicted,
        pixels: outcome.pixels.len(),
        masked: map.mask.iter().filter(|&&m| m).count(),
        dropped_relu: outcome.dropped_relu,
        dead_at: outcome.dead_at,
        files: ARTIFACTS.iter().map(|s| s.to_string()).collect(),
    };
    if run.json {
        return print_json(&summary);
    }
    println!(
        "class {} ({}): {} important pixels, {} masked; wrote {} files to {}",
        summary.class,
        summary.label,
        summary.pixels,
        summary.masked,
        ARTIFACTS.len(),
        run.out_dir.display()
    );
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut v = serde_json::to_vec(value).internal()?;
    v.push(b'\n');
    Ok(v)
}

/// Parsed `--grid-search` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub sigmas: Vec<f64>,
    pub thresholds: Vec<f64>,
}

pub fn parse_grid(parts: &[String]) -> Result<Grid, Failure> {
    let mut sigmas = None;
    let mut thresholds = None;
    for part in parts {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Failure::Input(anyhow!("grid entry `{part}` is not key=v1,v2,...")))?;
        let parsed = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("bad number in grid entry `{part}`"))
            .input()?;
        let slot = match key.trim() {
            "sigma" => &mut sigmas,
            "threshold" => &mut thresholds,
            other => return Err(Failure::Input(anyhow!("unknown grid key `{other}`; expected sigma or threshold"))),
        };
        if slot.replace(parsed).is_some() {
            return Err(Failure::Input(anyhow!("grid key `{key}` given twice")));
        }
    }
    match (sigmas, thresholds) {
        (Some(sigmas), Some(thresholds)) => Ok(Grid { sigmas, thresholds }),
        _ => Err(Failure::Input(anyhow!("grid search needs both sigma=... and threshold=..."))),
    }
}

pub fn eval(
    model: &Path,
    dataset: &Path,
    bcfg: &BacktrackConfig,
    scfg: &SaliencyConfig,
    grid: Option<Grid>,
    jobs: usize,
    strict: bool,
) -> Result<(), Failure> {
    bcfg.validate().input()?;
    let (net, pre) = load_model(model).input()?;
    let opts = EvalOptions { strict, jobs };
    match grid {
        Some(g) => {
            let report = eval::grid_search(&net, &pre, dataset, bcfg, &g.sigmas, &g.thresholds, &opts).input()?;
            print_json(&report)
        }
        None => {
            let report = eval::dataset_run(&net, &pre, dataset, bcfg, scfg, &opts).input()?;
            print_json(&report)
        }
    }
}

pub fn selftest(seed: u64, trials: usize, json: bool, inject_fault: bool) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Input(anyhow!("--seeds must be at least 1")));
    }
    let report = run_selftest(seed, trials, inject_fault);
    if json {
        print_json(&report)?;
    } else {
        println!(
            "selftest seed {}: {} networks, {} selections compared, {} mismatches ({:.2}s)",
            report.seed,
            report.trials,
            report.selections,
            report.mismatches.len(),
            report.elapsed.as_secs_f64()
        );
    }
    if report.passed() {
        return Ok(());
    }
    for m in report.mismatches.iter().take(5) {
        eprintln!(
            "trial {} at {}: expected {:?}, got {:?}",
            m.trial, m.layer, m.expected, m.actual
        );
    }
    Err(Failure::Internal(anyhow!(
        "{} backtrack selections disagree with the oracle",
        report.mismatches.len()
    )))
}
