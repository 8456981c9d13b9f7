//! Rendering important pixels: Gaussian saliency field and mask, attention
//! heatmap, coarse grid projection and bounding boxes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtrack::SpatialLoc;
use crate::tensor::Shape3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaliencyError {
    #[error("sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("pixel ({y}, {x}) outside {width}x{height} image")]
    PixelOutOfBounds { y: usize, x: usize, width: usize, height: usize },
    #[error("image {image_w}x{image_h} is smaller than the {grid_w}x{grid_h} grid")]
    GridTooFine {
        image_w: usize,
        image_h: usize,
        grid_w: usize,
        grid_h: usize,
    },
    #[error("node {0:?} outside grid")]
    NodeOutsideGrid(SpatialLoc),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Mask cut-off on the max-normalised field.
    pub threshold: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            threshold: 0.3,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(SaliencyError::Sigma(self.sigma));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(SaliencyError::Threshold(self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, values in `[0, 1]`.
    pub field: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SaliencyMap {
    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.field[y * self.width + x]
    }

    pub fn masked(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Re-thresholds the field without recomputing it.
    pub fn with_threshold(&self, threshold: f64) -> SaliencyMap {
        SaliencyMap {
            mask: threshold_field(&self.field, threshold),
            ..self.clone()
        }
    }

    /// Field quantised to 8-bit gray, `round(v·255)`.
    pub fn field_gray(&self) -> Vec<u8> {
        self.field.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    /// Mask as 8-bit gray with values {0, 255}.
    pub fn mask_gray(&self) -> Vec<u8> {
        self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
    }
}

fn threshold_field(field: &[f64], threshold: f64) -> Vec<bool> {
    // an all-zero field never produces a mask, whatever the threshold
    field.iter().map(|&v| v > 0.0 && v >= threshold).collect()
}

/// Sums a Gaussian of std-dev `sigma` around every pixel (truncated at a
/// radius of 3σ), normalises by the maximum and thresholds.
pub fn splat_gaussian(
    pixels: &[(usize, usize)],
    width: usize,
    height: usize,
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap, SaliencyError> {
    cfg.validate()?;
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y >= height || x >= width) {
        return Err(SaliencyError::PixelOutOfBounds { y, x, width, height });
    }
    let mut field = vec![0.0f64; width * height];
    let radius = 3.0 * cfg.sigma;
    let reach = radius.floor() as isize;
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    // offsets within the truncation disc, shared by every pixel
    let mut stencil = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d2 = (dy * dy + dx * dx) as f64;
            if d2 <= radius * radius {
                stencil.push((dy, dx, (-d2 / denom).exp()));
            }
        }
    }
    for &(py, px) in pixels {
        for &(dy, dx, g) in &stencil {
            let y = py as isize + dy;
            let x = px as isize + dx;
            if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                field[y as usize * width + x as usize] += g;
            }
        }
    }
    let max = field.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        field.iter_mut().for_each(|v| *v /= max);
    }
    let mask = threshold_field(&field, cfg.threshold);
    Ok(SaliencyMap {
        width,
        height,
        field,
        mask,
    })
}

/// Blue → green → red, piecewise linear with breakpoints at 0, 0.5 and 1.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let q = |f: f64| (f * 255.0).round() as u8;
    if v <= 0.5 {
        let t = v / 0.5;
        [0, q(t), q(1.0 - t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [q(t), q(1.0 - t), 0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

/// Colours the un-thresholded field (red = most attention).
pub fn attention_heatmap(map: &SaliencyMap) -> RgbImage {
    RgbImage {
        width: map.width,
        height: map.height,
        data: map.field.iter().flat_map(|&v| colormap(v)).collect(),
    }
}

/// Axis-aligned pixel rectangle, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub y_min: usize,
    pub x_min: usize,
    pub y_max: usize,
    pub x_max: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }
}

/// Image box corresponding to a node of a coarse spatial grid. The image is
/// split into `floor(image / grid)`-sized cells; the last row and column
/// absorb any remainder so the boxes tile the image.
pub fn coarse_project(
    node: SpatialLoc,
    grid: Shape3,
    image_w: usize,
    image_h: usize,
) -> Result<PixelRect, SaliencyError> {
    if image_w < grid.width || image_h < grid.height {
        return Err(SaliencyError::GridTooFine {
            image_w,
            image_h,
            grid_w: grid.width,
            grid_h: grid.height,
        });
    }
    if node.channel >= grid.channels || node.y >= grid.height || node.x >= grid.width {
        return Err(SaliencyError::NodeOutsideGrid(node));
    }
    let span = |i: usize, cells: usize, extent: usize| {
        let step = extent / cells;
        let end = if i + 1 == cells { extent } else { (i + 1) * step };
        (i * step, end - 1)
    };
    let (y_min, y_max) = span(node.y, grid.height, image_h);
    let (x_min, x_max) = span(node.x, grid.width, image_w);
    Ok(PixelRect {
        y_min,
        x_min,
        y_max,
        x_max,
    })
}

/// Tight box around the extreme pixels, `None` for an empty set.
pub fn bounding_box(pixels: &[(usize, usize)]) -> Option<PixelRect> {
    let (&(y0, x0), rest) = pixels.split_first()?;
    Some(rest.iter().fold(
        PixelRect {
            y_min: y0,
            x_min: x0,
            y_max: y0,
            x_max: x0,
        },
        |r, &(y, x)| PixelRect {
            y_min: r.y_min.min(y),
            x_min: r.x_min.min(x),
            y_max: r.y_max.max(y),
            x_max: r.x_max.max(x),
        },
    ))
}
