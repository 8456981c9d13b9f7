//! Binary PPM (P6) and PGM (P5) codecs, 8-bit only.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PnmError {
    #[error("byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T, PnmError> {
    Err(PnmError::Parse {
        offset,
        message: message.into(),
    })
}

/// 8-bit raster with `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return parse_err(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| parse_err(start, format!("{what} does not fit")))
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(Raster, usize), PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let want = std::str::from_utf8(magic).expect("ascii");
        return parse_err(0, format!("{want} required"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return parse_err(maxval_at, "zero image dimension");
    }
    if maxval == 0 || maxval > 255 {
        return parse_err(maxval_at, format!("unsupported maxval {maxval}"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return parse_err(cur.pos, "expected single whitespace before raster"),
    }
    let len = width * height * channels;
    let raster = bytes
        .get(cur.pos..cur.pos + len)
        .ok_or_else(|| PnmError::Parse {
            offset: bytes.len(),
            message: format!("raster truncated: need {len} bytes from offset {}", cur.pos),
        })?;
    Ok((
        Raster {
            width,
            height,
            channels,
            data: raster.to_vec(),
        },
        maxval,
    ))
}

/// Decodes a P6 image. Only maxval 255 is accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<Raster, PnmError> {
    let (raster, maxval) = decode(bytes, b"P6", 3)?;
    if maxval != 255 {
        return parse_err(0, format!("maxval 255 required, found {maxval}"));
    }
    Ok(raster)
}

/// Decodes a P5 image, rescaling samples to 0–255 when maxval < 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Raster, PnmError> {
    let (mut raster, maxval) = decode(bytes, b"P5", 1)?;
    if maxval != 255 {
        for v in raster.data.iter_mut() {
            *v = ((*v as usize).min(maxval) * 255 / maxval) as u8;
        }
    }
    Ok(raster)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb raster size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "gray raster size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}
