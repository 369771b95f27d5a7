//! Dense 4-D tensor storage in NCHW layout plus the "RTEN v1" binary
//! serialization used by archives and checkpoints.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a 4-D tensor: (batch, channels, rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "all dimensions must be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Shape { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of element (i, j, y, x): ((i*c + j)*h + y)*w + x.
    #[inline(always)]
    pub fn index(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        ((i * self.c + j) * self.h + y) * self.w + x
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array of scalars in row-major (n, c, h, w) order.
///
/// Tensors are plain owned buffers: immutable once constructed except for
/// explicit in-place mutation through `data_mut`/`at_mut` (used by the
/// optimizer and by gradient accumulation). They are `Send + Sync` and can
/// be shared read-only across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform samples in `[lo, hi)`. Draws are made in `f64` so a given
    /// seed produces the same values regardless of `T`.
    pub fn rand_uniform<R: Rng>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor { shape, data }
    }

    #[inline(always)]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline(always)]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(i, j, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, i: usize, j: usize, y: usize, x: usize) -> &mut T {
        let idx = self.shape.index(i, j, y, x);
        &mut self.data[idx]
    }

    /// Contiguous (h*w) plane of sample `i`, channel `j`.
    #[inline(always)]
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (i * self.shape.c + j) * hw;
        &self.data[start..start + hw]
    }

    #[inline(always)]
    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let start = (i * self.shape.c + j) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a + b)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a - b)
    }

    /// Elementwise `self * other`.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a * b)
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on mismatched shapes {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "accumulation on mismatched shapes {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Maximum absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "comparison on mismatched shapes {} vs {}",
                self.shape, other.shape
            )));
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = (a.to_f64_lossy() - b.to_f64_lossy()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Copies channels `[lo, hi)` into a new tensor.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if lo >= hi || hi > s.c {
            return Err(Error::dim(format!(
                "channel slice [{lo}, {hi}) outside 0..{}",
                s.c
            )));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, hi - lo, s.h, s.w)?);
        for i in 0..s.n {
            for j in lo..hi {
                out.plane_mut(i, j - lo).copy_from_slice(self.plane(i, j));
            }
        }
        Ok(out)
    }

    /// Writes `src` into channels starting at `lo`.
    pub fn paste_channels(&mut self, lo: usize, src: &Tensor<T>) -> Result<()> {
        let s = self.shape;
        let ss = src.shape();
        if ss.n != s.n || ss.h != s.h || ss.w != s.w || lo + ss.c > s.c {
            return Err(Error::dim(format!(
                "paste of {ss} at channel {lo} does not fit in {s}"
            )));
        }
        for i in 0..s.n {
            for j in 0..ss.c {
                self.plane_mut(i, lo + j).copy_from_slice(src.plane(i, j));
            }
        }
        Ok(())
    }

    /// Precision cast; exact when widening or when `T == U`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// RTEN v1: magic "RTEN", u8 version = 1, u8 dtype (0 = f32), u32 rank = 4,
// 4 x u64 dims, then the row-major little-endian f32 payload.
// ---------------------------------------------------------------------------

const RTEN_MAGIC: &[u8; 4] = b"RTEN";
const RTEN_VERSION: u8 = 1;
const RTEN_DTYPE_F32: u8 = 0;

impl<T: Scalar> Tensor<T> {
    /// Serializes as RTEN v1. The payload is f32; for `T = f32` this is a
    /// bit-exact round trip.
    pub fn write_rten<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(RTEN_MAGIC)?;
        out.write_all(&[RTEN_VERSION, RTEN_DTYPE_F32])?;
        out.write_all(&4u32.to_le_bytes())?;
        for d in self.shape.dims() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads an RTEN v1 blob. `base_offset` is folded into parse-error
    /// offsets so containers can report absolute positions.
    pub fn read_rten<R: Read>(input: &mut R, base_offset: u64) -> Result<Tensor<T>> {
        let mut header = [0u8; 10];
        read_exact_at(input, &mut header, base_offset)?;
        if &header[0..4] != RTEN_MAGIC {
            return Err(Error::Parse {
                offset: base_offset,
                message: format!("bad RTEN magic {:?}", &header[0..4]),
            });
        }
        if header[4] != RTEN_VERSION {
            return Err(Error::Parse {
                offset: base_offset + 4,
                message: format!("unsupported RTEN version {}", header[4]),
            });
        }
        if header[5] != RTEN_DTYPE_F32 {
            return Err(Error::Parse {
                offset: base_offset + 5,
                message: format!("unsupported RTEN dtype {}", header[5]),
            });
        }
        let rank = u32::from_le_bytes(header[6..10].try_into().unwrap());
        if rank != 4 {
            return Err(Error::Parse {
                offset: base_offset + 6,
                message: format!("RTEN rank must be 4, got {rank}"),
            });
        }
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            let mut raw = [0u8; 8];
            read_exact_at(input, &mut raw, base_offset + 10 + 8 * k as u64)?;
            *d = u64::from_le_bytes(raw) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| Error::Parse {
            offset: base_offset + 10,
            message: e.to_string(),
        })?;
        let payload_offset = base_offset + 42;
        let mut raw = vec![0u8; shape.numel() * 4];
        read_exact_at(input, &mut raw, payload_offset)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok(Tensor { shape, data })
    }

    /// Size in bytes of this tensor's RTEN encoding.
    pub fn rten_len(&self) -> u64 {
        42 + self.numel() as u64 * 4
    }
}

pub(crate) fn read_exact_at<R: Read>(input: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    input.read_exact(buf).map_err(|e| Error::Parse {
        offset,
        message: format!("truncated input ({e})"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_index_matches_invariant() {
        let s = Shape::new(2, 3, 4, 5).unwrap();
        assert_eq!(s.index(1, 2, 3, 4), ((1 * 3 + 2) * 4 + 3) * 5 + 4);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Shape::new(1, 0, 4, 4).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        let s = Shape::new(1, 1, 2, 2).unwrap();
        assert!(Tensor::<f32>::from_vec(s, vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(s, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn rten_round_trip_is_bit_exact_for_f32() {
        let s = Shape::new(2, 1, 3, 2).unwrap();
        let t = Tensor::<f32>::from_vec(
            s,
            vec![
                0.0, -1.5, 3.25, f32::MIN_POSITIVE, 1e30, -0.0, 7.125, 42.0, 0.1, 0.2, 0.3, 0.4,
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_rten(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, t.rten_len());
        let back = Tensor::<f32>::read_rten(&mut buf.as_slice(), 0).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rten_truncated_payload_reports_offset() {
        let s = Shape::new(1, 1, 2, 2).unwrap();
        let t = Tensor::<f32>::from_vec(s, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_rten(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Tensor::<f32>::read_rten(&mut buf.as_slice(), 0).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 42),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn rten_bad_magic_rejected() {
        let mut buf = vec![b'X', b'T', b'E', b'N'];
        buf.extend_from_slice(&[1, 0]);
        let err = Tensor::<f32>::read_rten(&mut buf.as_slice(), 0).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }
}
