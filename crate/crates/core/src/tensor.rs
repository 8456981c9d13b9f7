//! Dense channel-major containers shared by every stage of the pipeline.
//!
//! Values are stored as `f32`; reductions accumulate in `f64` and round once
//! at the end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDimension((usize, usize, usize)),
    #[error("data length {actual} does not match shape product {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat offset {0}")]
    NonFinite(usize),
    #[error("{layer}: output coordinate ({y}, {x}) lies outside the {out_h}x{out_w} output grid")]
    OutsideOutputGrid {
        layer: String,
        y: usize,
        x: usize,
        out_h: usize,
        out_w: usize,
    },
}

/// Shape of a 3-D activation volume: channels, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self, TensorError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::ZeroDimension((channels, height, width)));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        assert!(
            c < self.channels && y < self.height && x < self.width,
            "index ({c}, {y}, {x}) out of range for shape {self}"
        );
        c * self.plane() + y * self.width + x
    }

    /// Inverse of [`Shape3::offset`].
    #[inline]
    pub fn unravel(&self, offset: usize) -> (usize, usize, usize) {
        assert!(offset < self.len(), "offset {offset} out of range for shape {self}");
        let plane = self.plane();
        let c = offset / plane;
        let rem = offset % plane;
        (c, rem / self.width, rem % self.width)
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Sliding-window geometry of a convolution or pooling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel_h,
            kernel_w,
            stride,
            pad,
        }
    }

    /// Output grid size for an input of `h`×`w`; `None` when no complete
    /// window fits (incomplete windows are dropped).
    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return None;
        }
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Maps window offset `(i, j)` of output `(y, x)` to an input coordinate,
    /// or `None` when it falls in the zero padding.
    #[inline]
    pub fn source(&self, y: usize, x: usize, i: usize, j: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let sy = (y * self.stride + i).checked_sub(self.pad)?;
        let sx = (x * self.stride + j).checked_sub(self.pad)?;
        (sy < h && sx < w).then_some((sy, sx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: Shape3,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn from_vec(shape: Shape3, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Panics when the index is out of range.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let o = self.shape.offset(c, y, x);
        self.data[o] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Extracts the `(C, kh, kw)` input sub-volume feeding output position
    /// `center` of a window operation. Padding positions read as zero.
    pub fn receptive_field(&self, center: (usize, usize), window: &Window) -> Result<Tensor3, TensorError> {
        self.receptive_field_named(center, window, "layer")
    }

    pub(crate) fn receptive_field_named(
        &self,
        center: (usize, usize),
        window: &Window,
        layer: &str,
    ) -> Result<Tensor3, TensorError> {
        let Shape3 {
            channels,
            height,
            width,
        } = self.shape;
        let (y, x) = center;
        let (out_h, out_w) = window.output_dims(height, width).unwrap_or((0, 0));
        if y >= out_h || x >= out_w {
            return Err(TensorError::OutsideOutputGrid {
                layer: layer.to_string(),
                y,
                x,
                out_h,
                out_w,
            });
        }
        let shape = Shape3::new(channels, window.kernel_h, window.kernel_w)?;
        let mut out = Vec::with_capacity(shape.len());
        for c in 0..channels {
            let plane = self.channel(c);
            for i in 0..window.kernel_h {
                for j in 0..window.kernel_w {
                    out.push(match window.source(y, x, i, j, height, width) {
                        Some((sy, sx)) => plane[sy * width + sx],
                        None => 0.0,
                    });
                }
            }
        }
        Ok(Tensor3 { shape, data: out })
    }

    /// Coordinates of the largest element; ties go to the smallest offset.
    pub fn argmax3(&self) -> (usize, usize, usize) {
        self.shape.unravel(argmax(&self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor1 {
    data: Vec<f32>,
}

impl Tensor1 {
    pub fn from_vec(data: Vec<f32>) -> Result<Self, TensorError> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value, first occurrence on ties. Panics on an empty slice.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor3 {
        Tensor3::from_vec(Shape3::new(c, h, w).unwrap(), data).unwrap()
    }

    #[test]
    fn at_layout() {
        assert_eq!(t(1, 1, 1, vec![5.0]).at(0, 0, 0), 5.0);
        assert_eq!(t(2, 1, 1, vec![1.0, 2.0]).at(1, 0, 0), 2.0);
        assert_eq!(t(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).at(0, 1, 0), 3.0);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn at_out_of_range_panics() {
        t(1, 2, 2, vec![0.0; 4]).at(0, 2, 0);
    }

    #[test]
    fn shape_rejects_zero_and_tensor_rejects_bad_data() {
        assert!(Shape3::new(0, 1, 1).is_err());
        let s = Shape3::new(1, 1, 2).unwrap();
        assert!(matches!(
            Tensor3::from_vec(s, vec![1.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert_eq!(
            Tensor3::from_vec(s, vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite(1))
        );
    }

    #[test]
    fn receptive_field_top_left_block() {
        let x = t(1, 3, 3, (1..=9).map(|v| v as f32).collect());
        let rf = x.receptive_field((0, 0), &Window::new(2, 2, 1, 0)).unwrap();
        assert_eq!(rf.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn receptive_field_zero_padding() {
        let x = t(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let rf = x.receptive_field((0, 0), &Window::new(3, 3, 1, 1)).unwrap();
        assert_eq!(rf.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn receptive_field_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t(1, 8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let rf = x.receptive_field((1, 1), &Window::new(3, 3, 2, 0)).unwrap();
        let mut expected = Vec::new();
        for r in 2..=4 {
            for c in 2..=4 {
                expected.push(x.data()[r * 8 + c]);
            }
        }
        assert_eq!(rf.data(), expected.as_slice());
    }

    #[test]
    fn receptive_field_rejects_center_outside_grid() {
        let x = t(1, 4, 4, vec![0.0; 16]);
        let err = x
            .receptive_field_named((3, 0), &Window::new(2, 2, 2, 0), "pool3")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pool3") && msg.contains("(3, 0)"), "{msg}");
    }

    #[test]
    fn argmax3_cases() {
        assert_eq!(t(1, 2, 2, vec![1.0, 5.0, 3.0, 2.0]).argmax3(), (0, 0, 1));
        assert_eq!(t(2, 2, 2, vec![4.0; 8]).argmax3(), (0, 0, 0));
    }

    #[test]
    fn argmax3_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            // small integer range makes ties common
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(0..5) as f32).collect();
            let x = t(c, h, w, data.clone());
            let mut best = 0;
            for i in 0..data.len() {
                if data[i] > data[best] {
                    best = i;
                }
            }
            let expected = (best / (h * w), (best % (h * w)) / w, best % w);
            assert_eq!(x.argmax3(), expected);
            assert_eq!(x.argmax3(), x.argmax3());
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn offset_round_trip(c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in 0usize..10_000) {
                let s = Shape3::new(c, h, w).unwrap();
                let off = seed % s.len();
                let (cc, yy, xx) = s.unravel(off);
                prop_assert_eq!(s.offset(cc, yy, xx), off);
                let mut x = Tensor3::zeros(s);
                x.set(cc, yy, xx, 3.5);
                prop_assert_eq!(x.data()[off], 3.5);
                prop_assert_eq!(x.at(cc, yy, xx), 3.5);
            }

            #[test]
            fn receptive_field_size(c in 1usize..4, h in 1usize..9, w in 1usize..9,
                                    k in 1usize..4, s in 1usize..3, p in 0usize..2) {
                let x = Tensor3::zeros(Shape3::new(c, h, w).unwrap());
                let win = Window::new(k, k, s, p);
                if let Some((oh, ow)) = win.output_dims(h, w) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let rf = x.receptive_field((y, xx), &win).unwrap();
                            prop_assert_eq!(rf.data().len(), c * k * k);
                        }
                    }
                    prop_assert!(x.receptive_field((oh, 0), &win).is_err());
                }
            }
        }
    }
}
