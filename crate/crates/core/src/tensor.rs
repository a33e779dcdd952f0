//! Dense rank-4 arrays in batch x channel x height x width layout, plus the
//! percentile primitive used by intensity normalization.
//!
//! All numeric work in this crate is 64-bit: gradient checks need the
//! arithmetic headroom, and model-to-model speed comparisons are taken as
//! ratios so element width cancels.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic bytes opening a serialized tensor blob.
pub const TENSOR_MAGIC: [u8; 4] = *b"VT4\0";

/// Dense rank-4 array of f64 in row-major batch -> channel -> row -> column
/// order. The universal value type for images, activations, masks, and
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    /// Builds a tensor from shape and backing data.
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {shape:?} (= {expect})",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "zero dimension in {shape:?}");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Same shape as `self`, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            data: vec![0.0; self.data.len()],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offset of element (b, c, y, x).
    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(
            b < self.shape[0] && c < self.shape[1] && y < self.shape[2] && x < self.shape[3]
        );
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    /// Inverse of [`offset`](Self::offset).
    #[inline]
    pub fn coords(&self, flat: usize) -> (usize, usize, usize, usize) {
        let [_, ch, h, w] = self.shape;
        let x = flat % w;
        let y = (flat / w) % h;
        let c = (flat / (w * h)) % ch;
        let b = flat / (w * h * ch);
        (b, c, y, x)
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.offset(b, c, y, x);
        &mut self.data[i]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// One (channel, height, width) plane of a batch item, as a slice.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = self.offset(b, c, 0, 0);
        let n = self.shape[2] * self.shape[3];
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = self.offset(b, c, 0, 0);
        let n = self.shape[2] * self.shape[3];
        &mut self.data[start..start + n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self + scale * other`, in place.
    pub fn axpy(&mut self, scale: f64, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Stacks single-batch tensors with identical (c, h, w) along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptySample)?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0usize;
        for t in items {
            if t.shape[1] != c || t.shape[2] != h || t.shape[3] != w {
                return Err(Error::ShapeMismatch {
                    left: format!("{:?}", first.shape),
                    right: format!("{:?}", t.shape),
                });
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor4::new([batch, c, h, w], data)
    }

    /// Extracts batch item `b` as a [1, c, h, w] tensor.
    pub fn batch_item(&self, b: usize) -> Tensor4 {
        let [_, c, h, w] = self.shape;
        let start = self.offset(b, 0, 0, 0);
        let n = c * h * w;
        Tensor4 {
            shape: [1, c, h, w],
            data: self.data[start..start + n].to_vec(),
        }
    }

    /// Writes the documented binary blob: magic "VT4\0", four little-endian
    /// u64 dims, then the raw little-endian f64 payload.
    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        for d in self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a blob written by [`write_blob`](Self::write_blob).
    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"
            )));
        }
        let mut shape = [0usize; 4];
        let mut buf8 = [0u8; 8];
        for d in &mut shape {
            r.read_exact(&mut buf8)?;
            *d = u64::from_le_bytes(buf8) as usize;
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!("zero dimension in blob shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        Tensor4::new(shape, data)
    }
}

/// Linear-interpolation percentile: sort, rank r = p/100 * (n-1), interpolate
/// between floor(r) and ceil(r). This convention is fixed so golden values
/// stay stable.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "percentile p must be in [0, 100], got {p}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in percentile input"));
    let r = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    let frac = r - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_single_element() {
        assert_eq!(percentile(&[5.0], 50.0).unwrap(), 5.0);
    }

    #[test]
    fn percentile_odd_median() {
        assert_eq!(percentile(&[0.0, 1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.0);
    }

    #[test]
    fn percentile_interpolates() {
        // r = 0.25, value = 0 + 0.25 * 10
        assert_eq!(percentile(&[0.0, 10.0], 25.0).unwrap(), 2.5);
    }

    #[test]
    fn percentile_empty_errors() {
        assert!(matches!(percentile(&[], 50.0), Err(Error::EmptySample)));
    }

    #[test]
    fn percentile_unsorted_input() {
        assert_eq!(percentile(&[4.0, 0.0, 2.0, 1.0, 3.0], 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&[4.0, 0.0, 2.0, 1.0, 3.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn offset_coords_roundtrip() {
        let t = Tensor4::zeros([2, 3, 4, 5]);
        for flat in 0..t.len() {
            let (b, c, y, x) = t.coords(flat);
            assert_eq!(t.offset(b, c, y, x), flat);
        }
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor4::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn blob_roundtrip() {
        let t = Tensor4::new([1, 2, 2, 3], (0..12).map(|i| i as f64 * 0.5 - 2.0).collect()).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VT4\0");
        let back = Tensor4::read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn stack_checks_shapes() {
        let a = Tensor4::zeros([1, 2, 3, 3]);
        let b = Tensor4::zeros([1, 2, 3, 3]);
        let s = Tensor4::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), [2, 2, 3, 3]);
        let c = Tensor4::zeros([1, 1, 3, 3]);
        assert!(Tensor4::stack(&[&a, &c]).is_err());
    }
}
