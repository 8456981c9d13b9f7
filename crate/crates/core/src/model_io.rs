//! Model file format, image loading and input preprocessing.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CNNBTRK1"                      8 bytes
//! version = 1                     u32
//! descriptor length               u32
//! descriptor                      UTF-8 JSON
//! weights                         f32 per layer in descriptor order:
//!                                   conv  kernels (out, in, kh, kw) then bias (out)
//!                                   dense matrix  (out, in) row-major then bias (out)
//! checksum                        u64 FNV-1a over every preceding byte
//! ```

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ConvLayer, DenseLayer, Layer, LayerError, NetworkError, NetworkSpec, PoolLayer};
use crate::pnm::{self, PnmError};
use crate::tensor::{Shape3, Tensor3, TensorError, Window};

pub const MAGIC: &[u8; 8] = b"CNNBTRK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model file not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a CNNBTRK1 model file")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    BadChecksum { stored: u64, computed: u64 },
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("non-finite weight in layer {layer}")]
    NonFiniteWeight { layer: usize },
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: PnmError,
    },
}

/// Input preparation stored with the model: bilinear resize to
/// `width`×`height`, then `value·scale − mean[c]` per RGB channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub width: usize,
    pub height: usize,
    pub mean: [f32; 3],
    pub scale: f32,
    #[serde(default = "rgb")]
    pub channel_order: String,
}

fn rgb() -> String {
    "RGB".to_string()
}

impl PreprocessSpec {
    pub fn new(width: usize, height: usize, mean: [f32; 3], scale: f32) -> Self {
        Self {
            width,
            height,
            mean,
            scale,
            channel_order: rgb(),
        }
    }

    /// No resize beyond `width`×`height`, no mean, unit scale.
    pub fn identity(width: usize, height: usize) -> Self {
        Self::new(width, height, [0.0; 3], 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerDesc {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
    },
    Relu,
    Maxpool {
        kernel: [usize; 2],
        stride: usize,
    },
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Descriptor {
    input_shape: [usize; 3],
    class_labels: Vec<String>,
    preprocess: PreprocessSpec,
    layers: Vec<LayerDesc>,
}

fn describe(layer: &Layer) -> LayerDesc {
    match layer {
        Layer::Conv(c) => LayerDesc::Conv {
            in_channels: c.in_channels(),
            out_channels: c.out_channels(),
            kernel: [c.window().kernel_h, c.window().kernel_w],
            stride: c.window().stride,
            pad: c.window().pad,
        },
        Layer::Relu => LayerDesc::Relu,
        Layer::MaxPool(p) => LayerDesc::Maxpool {
            kernel: [p.window().kernel_h, p.window().kernel_w],
            stride: p.window().stride,
        },
        Layer::Flatten => LayerDesc::Flatten,
        Layer::Dense(d) => LayerDesc::Dense {
            in_dim: d.in_dim(),
            out_dim: d.out_dim(),
        },
        Layer::Softmax => LayerDesc::Softmax,
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serialises a network and its preprocessing into the model format.
pub fn encode_model(net: &NetworkSpec, pre: &PreprocessSpec) -> Vec<u8> {
    let s = net.input_shape();
    let desc = Descriptor {
        input_shape: [s.channels, s.height, s.width],
        class_labels: net.class_labels().to_vec(),
        preprocess: pre.clone(),
        layers: net.layers().iter().map(describe).collect(),
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vals: &[f32]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                put(c.weights());
                put(c.bias());
            }
            Layer::Dense(d) => {
                put(d.weights());
                put(d.bias());
            }
            _ => {}
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_model(path: impl AsRef<Path>, net: &NetworkSpec, pre: &PreprocessSpec) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(net, pre)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, layer: usize) -> Result<Vec<f32>, ModelError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| ModelError::Truncated("weight count overflow".into()))?, &format!("layer {layer} weights"))?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteWeight { layer });
        }
        Ok(vals)
    }
}

fn layer_err(layer: usize) -> impl Fn(LayerError) -> ModelError {
    move |e| match e {
        LayerError::NonFiniteWeight(_) => ModelError::NonFiniteWeight { layer },
        other => ModelError::ShapeMismatch {
            layer,
            detail: other.to_string(),
        },
    }
}

/// Parses and fully validates a model image.
pub fn decode_model(bytes: &[u8]) -> Result<(NetworkSpec, PreprocessSpec), ModelError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 16 {
        return Err(ModelError::Truncated(format!("{} bytes total", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(ModelError::BadChecksum { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let dlen = r.u32("descriptor length")? as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(dlen, "descriptor")?).map_err(|e| ModelError::Descriptor(e.to_string()))?;

    let [c, h, w] = desc.input_shape;
    let input_shape = Shape3::new(c, h, w).map_err(|e| ModelError::Descriptor(e.to_string()))?;
    let pre = desc.preprocess;
    if pre.channel_order != "RGB" {
        return Err(ModelError::Descriptor(format!("channel order {} (RGB required)", pre.channel_order)));
    }
    if c != 3 || pre.width != w || pre.height != h {
        return Err(ModelError::Descriptor(format!(
            "preprocess target {}x{} RGB does not match input shape {input_shape}",
            pre.width, pre.height
        )));
    }

    let mut layers = Vec::with_capacity(desc.layers.len());
    for (i, d) in desc.layers.iter().enumerate() {
        let layer = match *d {
            LayerDesc::Conv {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                stride,
                pad,
            } => {
                let n = out_channels
                    .checked_mul(in_channels)
                    .and_then(|v| v.checked_mul(kh))
                    .and_then(|v| v.checked_mul(kw))
                    .ok_or_else(|| ModelError::ShapeMismatch { layer: i, detail: "conv size overflow".into() })?;
                let weights = r.f32s(n, i)?;
                let bias = r.f32s(out_channels, i)?;
                Layer::Conv(ConvLayer::new(in_channels, out_channels, Window::new(kh, kw, stride, pad), weights, bias).map_err(layer_err(i))?)
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Maxpool { kernel: [kh, kw], stride } => Layer::MaxPool(PoolLayer::new(kh, kw, stride).map_err(layer_err(i))?),
            LayerDesc::Flatten => Layer::Flatten,
            LayerDesc::Dense { in_dim, out_dim } => {
                let n = in_dim
                    .checked_mul(out_dim)
                    .ok_or_else(|| ModelError::ShapeMismatch { layer: i, detail: "dense size overflow".into() })?;
                let weights = r.f32s(n, i)?;
                let bias = r.f32s(out_dim, i)?;
                Layer::Dense(DenseLayer::new(in_dim, out_dim, weights, bias).map_err(layer_err(i))?)
            }
            LayerDesc::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(ModelError::Descriptor(format!(
            "{} unread bytes after the weight payload",
            body.len() - r.pos
        )));
    }
    let net = NetworkSpec::new(input_shape, layers, desc.class_labels).map_err(|e| match e {
        NetworkError::Layer { index, source, .. } => layer_err(index)(source),
        other => ModelError::Descriptor(other.to_string()),
    })?;
    Ok((net, pre))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetworkSpec, PreprocessSpec), ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ModelError::NotFound(path.display().to_string())
        } else {
            ModelError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    decode_model(&bytes)
}

/// Planar `(3, H, W)` tensor with values 0–255 from a P6 raster.
pub fn image_tensor(raster: &pnm::Raster) -> Tensor3 {
    assert_eq!(raster.channels, 3);
    let plane = raster.width * raster.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in raster.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32;
        }
    }
    Tensor3::from_vec(Shape3::new(3, raster.height, raster.width).expect("decoded dims positive"), data).expect("finite")
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor3, ImageError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raster = pnm::decode_ppm(&bytes).map_err(|source| ImageError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    Ok(image_tensor(&raster))
}

/// Bilinear resize using pixel-centre alignment
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped to the border).
pub fn resize_bilinear(img: &Tensor3, out_h: usize, out_w: usize) -> Result<Tensor3, TensorError> {
    let s = img.shape();
    let out_shape = Shape3::new(s.channels, out_h, out_w)?;
    if out_h == s.height && out_w == s.width {
        return Ok(img.clone());
    }
    let taps = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, s.height, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, s.width, out_w)).collect();
    let mut out = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        let p = img.channel(c);
        let at = |y: usize, x: usize| p[y * s.width + x] as f64;
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor3::from_vec(out_shape, out)
}

/// Resizes to the model input size and applies `value·scale − mean[c]`.
pub fn preprocess(img: &Tensor3, spec: &PreprocessSpec) -> Result<Tensor3, TensorError> {
    let resized = resize_bilinear(img, spec.height, spec.width)?;
    let shape = resized.shape();
    let plane = shape.plane();
    let data = resized
        .into_vec()
        .into_iter()
        .enumerate()
        .map(|(i, v)| v * spec.scale - spec.mean.get(i / plane).copied().unwrap_or(0.0))
        .collect();
    Tensor3::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{DenseLayer, Layer, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(rng: &mut ChaCha8Rng) -> NetworkSpec {
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let conv = ConvLayer::new(3, 2, Window::new(3, 3, 1, 1), r(54), r(2)).unwrap();
        NetworkSpec::new(
            Shape3::new(3, 4, 4).unwrap(),
            vec![
                Layer::Conv(conv),
                Layer::Relu,
                Layer::MaxPool(PoolLayer::new(2, 2, 2).unwrap()),
                Layer::Flatten,
                Layer::Dense(DenseLayer::new(8, 3, r(24), r(3)).unwrap()),
                Layer::Softmax,
            ],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = small_net(&mut rng);
        let pre = PreprocessSpec::new(4, 4, [1.0, 2.0, 3.0], 0.5);
        let bytes = encode_model(&net, &pre);
        assert_eq!(&bytes[..8], b"CNNBTRK1");
        let (back, pre_back) = decode_model(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(pre_back, pre);
    }

    #[test]
    fn corruption_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bytes = encode_model(&small_net(&mut rng), &PreprocessSpec::identity(4, 4));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        assert!(matches!(decode_model(&flipped), Err(ModelError::BadChecksum { .. })));
        let mut payload = bytes.clone();
        let mid = bytes.len() - 20;
        payload[mid] ^= 0x80;
        assert!(matches!(decode_model(&payload), Err(ModelError::BadChecksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_model(&magic), Err(ModelError::BadMagic)));
        assert!(matches!(decode_model(b"CNN"), Err(ModelError::BadMagic)));
    }

    /// Builds a model file from a raw descriptor and payload, with a valid checksum.
    fn forge(desc: &str, weights: &[f32]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        for w in weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    const PRE: &str = r#""preprocess":{"width":2,"height":1,"mean":[0,0,0],"scale":1}"#;

    #[test]
    fn dense_in_dim_mismatch_is_shape_error() {
        // flatten of (3,1,2) gives 6, descriptor claims 5
        let desc = format!(
            r#"{{"input_shape":[3,1,2],"class_labels":["a"],{PRE},"layers":[{{"type":"flatten"}},{{"type":"dense","in_dim":5,"out_dim":1}},{{"type":"softmax"}}]}}"#
        );
        let err = decode_model(&forge(&desc, &[0.0; 6])).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { layer: 1, .. }), "{err}");
    }

    #[test]
    fn nan_weight_rejected() {
        let desc = format!(
            r#"{{"input_shape":[3,1,2],"class_labels":["a"],{PRE},"layers":[{{"type":"flatten"}},{{"type":"dense","in_dim":6,"out_dim":1}},{{"type":"softmax"}}]}}"#
        );
        let mut w = vec![0.0f32; 7];
        w[2] = f32::NAN;
        let err = decode_model(&forge(&desc, &w)).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteWeight { layer: 1 }), "{err}");
        // short payload
        assert!(matches!(decode_model(&forge(&desc, &[0.0; 3])), Err(ModelError::Truncated(_))));
        // long payload
        assert!(matches!(decode_model(&forge(&desc, &[0.0; 9])), Err(ModelError::Descriptor(_))));
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_model("/nonexistent/model.cnnbtrk").unwrap_err();
        assert!(matches!(err, ModelError::NotFound(ref p) if p.contains("model.cnnbtrk")));
    }

    #[test]
    fn red_pixel_image() {
        let raster = pnm::decode_ppm(&pnm::encode_ppm(1, 1, &[255, 0, 0])).unwrap();
        assert_eq!(image_tensor(&raster).data(), &[255.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_image_matches_generator() {
        let (w, h) = (7, 5);
        let px = |y: usize, x: usize| [(x * 30) as u8, (y * 50) as u8, ((x + y) * 10) as u8];
        let rgb: Vec<u8> = (0..h).flat_map(|y| (0..w).flat_map(move |x| px(y, x))).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ppm");
        std::fs::write(&path, pnm::encode_ppm(w, h, &rgb)).unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), Shape3::new(3, h, w).unwrap());
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert_eq!(t.at(c, y, x), px(y, x)[c] as f32);
                }
            }
        }
    }

    #[test]
    fn preprocess_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Shape3::new(3, 6, 5).unwrap();
        let img = Tensor3::from_vec(s, (0..s.len()).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap();
        assert_eq!(preprocess(&img, &PreprocessSpec::identity(5, 6)).unwrap(), img);

        let c = Tensor3::from_vec(s, vec![100.0; s.len()]).unwrap();
        let out = preprocess(&c, &PreprocessSpec::new(9, 4, [10.0, 20.0, 30.0], 0.5)).unwrap();
        assert_eq!(out.shape(), Shape3::new(3, 4, 9).unwrap());
        for ch in 0..3 {
            assert!(out.channel(ch).iter().all(|&v| v == 50.0 - [10.0, 20.0, 30.0][ch]));
        }
    }

    #[test]
    fn bilinear_upsample_closed_form() {
        // corners a b / c d, 2x2 -> 4x4: src coords are -0.25, 0.25, 0.75, 1.25
        // (clamped to 0, 0.25, 0.75, 1), so the weight on the second sample is
        // 0, 0.25, 0.75, 1 along each axis
        let (a, b, c, d) = (0.0f64, 40.0, 80.0, 200.0);
        let img = Tensor3::from_vec(Shape3::new(1, 2, 2).unwrap(), vec![a as f32, b as f32, c as f32, d as f32]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let wts = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (wts[y], wts[x]);
                let e = a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + c * fy * (1.0 - fx) + d * fy * fx;
                assert!((out.at(0, y, x) as f64 - e).abs() < 1e-4, "({y},{x}) {} vs {e}", out.at(0, y, x));
            }
        }
    }
}
