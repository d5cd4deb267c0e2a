//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { kind: "ppm", detail: detail.into() }
}

/// Byte for a value in [0, 1]: `round(v·255)`, clamped.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// The image as it reads back after a write.
pub fn quantized(image: &Tensor) -> Tensor {
    image.map(|v| quantize(v) as f64 / 255.0)
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Config(format!("ppm needs an H×W×3 image, got {:?}", s)));
    }
    if !image.all_finite() {
        return Err(Error::NonFinite("image to encode".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(format!("bad {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed("missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(malformed(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(format!("empty image {width}x{height}")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("no separator after header"));
    }
    let payload = &bytes[h.pos + 1..];
    let need = width * height * 3;
    if payload.len() < need {
        return Err(malformed(format!("truncated payload: {} of {} bytes", payload.len(), need)));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![height, width, 3], data)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
