//! Binary PPM (P6, maxval 255) for 1×3×h×w tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn bad(detail: impl Into<String>) -> Error {
    Error::format("PPM image", detail)
}

/// Clamp to `[0, 1]`, scale by 255 and round half away from zero.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
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
            return Err(bad(format!("expected {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("{what} out of range")))
    }
}

pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("wrong magic; expected P6"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}; only 255 is supported")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let pixels = &bytes[h.pos + 1..];
    let need = width * height * 3;
    if pixels.len() < need {
        return Err(bad(format!("short pixel data: {} of {need} bytes", pixels.len())));
    }
    if pixels.len() > need {
        return Err(bad(format!("{} bytes after pixel data", pixels.len() - need)));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| {
        T::of(pixels[(y * width + x) * 3 + c] as f64 / 255.0)
    }))
}

pub fn encode_ppm<T: Real>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 1×3×h×w, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(img.at(0, c, y, x).as_f64()));
            }
        }
    }
    Ok(out)
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img)?)?)
}

/// Replicate a single-channel map to three channels for viewing.
pub fn gray_to_rgb<T: Real>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("gray_to_rgb", format!("expected 1×1×h×w, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, s.h, s.w), |_, _, y, x| map.at(0, 0, y, x)))
}

/// Rescale to `[0, 1]` by the tensor's own min and max. A flat map becomes all zeros.
pub fn min_max_normalize<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let v = v.as_f64();
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(x.shape());
    }
    x.map(|v| T::of((v.as_f64() - lo) / span))
}
