//! Netpbm grayscale/color image I/O (P2, P3, P5, P6 with maxval 255).
//!
//! Color images are converted to luma with BT.601 weights on load. Saving
//! always writes binary P5.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LUMA_R: f32 = 0.299;
const LUMA_G: f32 = 0.587;
const LUMA_B: f32 = 0.114;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PnmKind {
    GrayAscii,
    ColorAscii,
    GrayBinary,
    ColorBinary,
}

impl PnmKind {
    fn channels(self) -> usize {
        match self {
            PnmKind::GrayAscii | PnmKind::GrayBinary => 1,
            PnmKind::ColorAscii | PnmKind::ColorBinary => 3,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn uint(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8]) -> Result<(PnmKind, ImageSpec, Cursor<'_>)> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(0, "missing netpbm magic"));
    }
    let kind = match bytes[1] {
        b'2' => PnmKind::GrayAscii,
        b'3' => PnmKind::ColorAscii,
        b'5' => PnmKind::GrayBinary,
        b'6' => PnmKind::ColorBinary,
        _ => return Err(Error::format(1, "unsupported netpbm variant")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.uint("width")?;
    let height = cur.uint("height")?;
    cur.skip_space_and_comments();
    let maxval_pos = cur.pos;
    let maxval = cur.uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(Error::format(
            maxval_pos,
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    Ok((kind, ImageSpec { height, width }, cur))
}

/// Decodes a netpbm byte buffer into a `1x1xhxw` tensor in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (kind, spec, mut cur) = parse_header(bytes)?;
    let samples = spec.height * spec.width * kind.channels();
    let raw: Vec<u8> = match kind {
        PnmKind::GrayBinary | PnmKind::ColorBinary => {
            // exactly one whitespace byte separates the header from the raster
            if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
                return Err(Error::format(cur.pos, "expected whitespace after maxval"));
            }
            let start = cur.pos + 1;
            if bytes.len() - start < samples {
                return Err(Error::format(
                    bytes.len(),
                    format!(
                        "truncated pixel payload: need {samples} bytes, have {}",
                        bytes.len() - start
                    ),
                ));
            }
            bytes[start..start + samples].to_vec()
        }
        PnmKind::GrayAscii | PnmKind::ColorAscii => {
            let mut out = Vec::with_capacity(samples);
            for _ in 0..samples {
                cur.skip_space_and_comments();
                if cur.pos >= bytes.len() {
                    return Err(Error::format(cur.pos, "truncated pixel payload"));
                }
                let at = cur.pos;
                let v = cur.uint("pixel value")?;
                if v > 255 {
                    return Err(Error::format(at, format!("pixel value {v} exceeds maxval")));
                }
                out.push(v as u8);
            }
            out
        }
    };

    let data: Vec<f32> = match kind.channels() {
        1 => raw.iter().map(|&v| v as f32 / 255.0).collect(),
        _ => raw
            .chunks_exact(3)
            .map(|px| {
                (LUMA_R * px[0] as f32 + LUMA_G * px[1] as f32 + LUMA_B * px[2] as f32) / 255.0
            })
            .collect(),
    };
    Tensor::image(spec.height, spec.width, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&fs::read(path)?)
}

/// Encodes a single-channel tensor as binary P5; values are clamped to
/// `[0, 1]` and rounded to the nearest 8-bit level.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    t.require_single_channel("save_image")?;
    let mut out = format!("P5\n{} {}\n255\n", t.w(), t.h()).into_bytes();
    out.extend(t.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pgm(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[inline]
/// Smooth deterministic test image in `[0, 1]`: random oriented gratings
/// plus Gaussian blobs, rescaled to the unit range.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("synthetic image must be non-empty"));
    }
    let mut rng = Rng::new(seed);
    let gratings: Vec<[f64; 4]> = (0..6)
        .map(|_| {
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let period = rng.uniform(4.0, 32.0);
            [theta.cos(), theta.sin(), std::f64::consts::TAU / period, rng.uniform(0.0, 6.3)]
        })
        .collect();
    let blobs: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.uniform(0.0, h as f64),
                rng.uniform(0.0, w as f64),
                rng.uniform(2.0, 0.25 * h.max(w) as f64),
                rng.uniform(-2.0, 2.0),
            ]
        })
        .collect();
    let mut raw = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64, j as f64);
            let mut v: f64 = gratings
                .iter()
                .map(|g| (g[2] * (g[0] * x + g[1] * y) + g[3]).sin())
                .sum();
            for b in &blobs {
                let d2 = (y - b[0]).powi(2) + (x - b[1]).powi(2);
                v += b[3] * (-d2 / (2.0 * b[2] * b[2])).exp();
            }
            raw.push(v);
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::image(h, w, raw.into_iter().map(|v| ((v - lo) / span) as f32).collect())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
