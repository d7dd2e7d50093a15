//! Dense 4-D tensor in `(n, c, h, w)` row-major layout, plus the `SRTEN001`
//! dump format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"SRTEN001";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        let len = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::shape("tensor dimensions overflow"))?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {pos}")));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    /// Internal constructor for op outputs that are finite by construction.
    pub(crate) fn from_parts(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), n * c * h * w);
        Tensor { n, c, h, w, data }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor::from_parts(n, c, h, w, vec![0.0; n * c * h * w])
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f32) -> Self {
        assert!(value.is_finite());
        Tensor::from_parts(n, c, h, w, vec![value; n * c * h * w])
    }

    /// Single-channel image of shape `1x1xhxw`.
    pub fn image(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(1, 1, h, w, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.index(n, c, i, j)]
    }

    /// The `h*w` plane for batch `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = self.index(n, c, 0, 0);
        &self.data[start..start + self.plane_len()]
    }

    pub(crate) fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let start = self.index(n, c, 0, 0);
        let len = self.plane_len();
        &mut self.data[start..start + len]
    }

    /// Elementwise map; panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced non-finite value");
        Tensor::from_parts(self.n, self.c, self.h, self.w, data)
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn require_single_batch(&self, op: &str) -> Result<()> {
        if self.n != 1 {
            return Err(Error::shape(format!("{op} expects n=1, got n={}", self.n)));
        }
        Ok(())
    }

    pub(crate) fn require_single_channel(&self, op: &str) -> Result<()> {
        self.require_single_batch(op)?;
        if self.c != 1 {
            return Err(Error::shape(format!("{op} expects c=1, got c={}", self.c)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(TENSOR_MAGIC)?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let data = r.f32_vec(n * c * h * w)?;
        r.finish()?;
        Tensor::new(n, c, h, w, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Tensor::from_bytes(&fs::read(path)?)
    }
}

/// Little-endian cursor shared by the binary file formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::format(
                self.pos,
                format!("truncated payload while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!("bad magic, expected {}", String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4, "u32")?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4, "f32")?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, "payload size overflows"))?;
        let b = self.take(len, "f32 payload")?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos, "trailing bytes after payload"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(Tensor::new(1, 1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::new(1, 1, 1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Tensor::new(1, 1, 1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn indexing_is_nchw() {
        let t = Tensor::new(1, 2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.plane(0, 1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let t = Tensor::new(2, 1, 1, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-7, 9.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..8], b"SRTEN001");
        assert_eq!(Tensor::from_bytes(&bytes).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::Format { .. })));
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(
            Tensor::from_bytes(truncated),
            Err(Error::Format { offset: 24, .. })
        ));
    }
}
