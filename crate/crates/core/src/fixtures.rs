//! Small hand-built networks with known backtracking answers.

use crate::model_io::PreprocessSpec;
use crate::network::{ConvLayer, DenseLayer, Layer, NetworkSpec, PoolLayer};
use crate::tensor::{Shape3, Tensor3, Window};

/// `Conv(1×1, all weights 1) → ReLU → MaxPool(2×2) → Flatten → Dense → Softmax`
/// over a `channels × size × size` input. Class 0 ("bright") sums the pooled
/// map, class 1 ("dark") subtracts it, so any image with a lit pixel is
/// classified as class 0 and backtracks to exactly that pixel.
///
/// `size` must be even and at least 2.
pub fn bright_pixel_network(channels: usize, size: usize) -> NetworkSpec {
    assert!(size >= 2 && size.is_multiple_of(2), "size must be even");
    let conv = ConvLayer::new(channels, 1, Window::new(1, 1, 1, 0), vec![1.0; channels], vec![0.0]).expect("valid conv");
    let pooled = (size / 2) * (size / 2);
    let mut weights = vec![1.0; pooled];
    weights.extend(std::iter::repeat_n(-1.0, pooled));
    NetworkSpec::new(
        Shape3::new(channels, size, size).expect("positive"),
        vec![
            Layer::Conv(conv),
            Layer::Relu,
            Layer::MaxPool(PoolLayer::new(2, 2, 2).expect("valid pool")),
            Layer::Flatten,
            Layer::Dense(DenseLayer::new(pooled, 2, weights, vec![0.0; 2]).expect("valid dense")),
            Layer::Softmax,
        ],
        vec!["bright".into(), "dark".into()],
    )
    .expect("valid network")
}

/// Preprocessing for [`bright_pixel_network`] with 3 channels: no resize,
/// values scaled to `[0, 1]`.
pub fn bright_pixel_preprocess(size: usize) -> PreprocessSpec {
    PreprocessSpec::new(size, size, [0.0; 3], 1.0 / 255.0)
}

/// Black `channels × size × size` image with one pixel set to `value` in every channel.
pub fn bright_pixel_image(channels: usize, size: usize, y: usize, x: usize, value: f32) -> Tensor3 {
    let mut t = Tensor3::zeros(Shape3::new(channels, size, size).expect("positive"));
    for c in 0..channels {
        t.set(c, y, x, value);
    }
    t
}

/// Interleaved 8-bit RGB raster of a black image with white pixels at `lit`.
pub fn bright_pixel_rgb(size: usize, lit: &[(usize, usize)]) -> Vec<u8> {
    let mut rgb = vec![0u8; size * size * 3];
    for &(y, x) in lit {
        let o = (y * size + x) * 3;
        rgb[o..o + 3].fill(255);
    }
    rgb
}
