//! Dense row-major tensors and the small amount of linear algebra the
//! network needs.
//!
//! All kernels here are plain loops with a fixed accumulation order per
//! output element, so results are bit-identical regardless of SIMD width or
//! thread count. Reproducible training runs and golden forward hashes rely on
//! that.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type usable by tensors and the autodiff tape (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Validation(format!(
                "tensor of shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Dimensions of a `[C, H, W]` tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [C, H, W] tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> T {
        let (_, h, w) = self.chw();
        self.data[(c * h + i) * w + j]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, value: T) {
        let (_, h, w) = self.chw();
        self.data[(c * h + i) * w + j] = value;
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Validation(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn channels(&self, start: usize, len: usize) -> Self {
        let (c, h, w) = self.chw();
        assert!(start + len <= c, "channel slice out of range");
        let plane = h * w;
        Self {
            shape: vec![len, h, w],
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        }
    }

    /// Concatenate `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?
            .chw();
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            let (c, ph, pw) = p.chw();
            if (ph, pw) != (h, w) {
                return Err(Error::Validation(format!(
                    "concat spatial mismatch: {}x{} vs {}x{}",
                    ph, pw, h, w
                )));
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![channels, h, w],
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Loop order i-k-j: every output element accumulates its products in
/// increasing `k`, independent of how the inner loop is vectorized.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Unfold `input: [C, H, W]` into `[C·k·k, H·W]` columns for a stride-1,
/// zero-padded ("same") convolution with odd kernel size `k`.
pub fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for ch in 0..c {
        let src = &input[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let si = si as usize;
                    let j_lo = (-dx).max(0) as usize;
                    let j_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for j in j_lo..j_hi {
                        dst[i * w + j] = src[si * w + (j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `[C, H, W]`.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for ch in 0..c {
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let si = si as usize;
                    let j_lo = (-dx).max(0) as usize;
                    let j_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for j in j_lo..j_hi {
                        let d = &mut dst[si * w + (j as isize + dx) as usize];
                        *d = *d + src[i * w + j];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c, false);
        let expected = naive_matmul(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        // accumulate doubles it
        gemm(m, k, n, &a, &b, &mut c, true);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|v| (v as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|v| (v as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, c, h, w, k).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, c, h, w, k)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let cols = im2col(&x, 1, 3, 4, 3);
        assert_eq!(&cols[4 * 12..5 * 12], &x[..]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
