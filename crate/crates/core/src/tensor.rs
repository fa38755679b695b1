//! Dense `f32` kernels used by the toy transformer.
//!
//! Every reduction walks its operands left to right in index order, so the
//! same inputs always produce bit-identical outputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::TensorError;

/// Additive mask value for blocked attention entries.
///
/// Finite, so that `sentinel - sentinel` stays `0.0` instead of `NaN`.
pub const MASK_SENTINEL: f32 = -1e9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Returns the last row as an owned vector.
    pub fn last_row(&self) -> Option<Vec<f32>> {
        (self.rows > 0).then(|| self.row(self.rows - 1).to_vec())
    }
}

/// `a × b`.
///
/// Each output element accumulates `a[i][k] * b[k][j]` for `k = 0, 1, ...`
/// in that order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape {
            op: "matmul",
            expected: a.cols,
            actual: b.rows,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(&a.data, a.rows, a.cols, &b.data, b.cols, &mut out.data);
    Ok(out)
}

/// Raw-slice form of [`matmul`]; `out` is overwritten.
///
/// The loop order is i-k-j: the inner loop is an `axpy` over a contiguous
/// output row, which vectorises without changing the per-element summation
/// order.
pub(crate) fn matmul_into(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += aᵀ × b` for `a: m × k`, `b: m × n`, `out: k × n`.
pub(crate) fn matmul_at_b_acc(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out = a × bᵀ` for `a: m × n`, `b: k × n`, `out: m × k`.
pub(crate) fn matmul_a_bt(a: &[f32], m: usize, n: usize, b: &[f32], k: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Masked, max-subtracted softmax of one attention row.
///
/// A row whose mask entries are all the sentinel has no valid key and is
/// rejected with [`TensorError::DegenerateRow`].
pub fn softmax_row(row: &[f32], additive_mask_row: &[f32]) -> Result<Vec<f32>, TensorError> {
    let mut out = vec![0.0; row.len()];
    softmax_row_into(row, additive_mask_row, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_row_into(
    row: &[f32],
    mask: &[f32],
    out: &mut [f32],
) -> Result<(), TensorError> {
    if row.len() != mask.len() {
        return Err(TensorError::Shape {
            op: "softmax_row",
            expected: row.len(),
            actual: mask.len(),
        });
    }
    if mask.iter().all(|&m| m <= MASK_SENTINEL) {
        return Err(TensorError::DegenerateRow);
    }
    let mut max = f32::NEG_INFINITY;
    for (o, (&s, &m)) in out.iter_mut().zip(row.iter().zip(mask)) {
        *o = s + m;
        if *o > max {
            max = *o;
        }
    }
    let mut sum = 0.0f32;
    for o in out.iter_mut() {
        *o = libm::expf(*o - max);
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Root-mean-square normalisation: `row[i] / sqrt(mean(row²) + eps) * gain[i]`.
pub fn rms_normalize(row: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>, TensorError> {
    if row.len() != gain.len() {
        return Err(TensorError::Shape {
            op: "rms_normalize",
            expected: row.len(),
            actual: gain.len(),
        });
    }
    let mut out = vec![0.0; row.len()];
    rms_normalize_into(row, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalised row into `out` and returns the inverse RMS.
pub(crate) fn rms_normalize_into(row: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let mut ss = 0.0f32;
    for &x in row {
        ss += x * x;
    }
    let mean = ss / row.len() as f32;
    let denom = libm::sqrtf(mean + eps);
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for ((o, &x), &g) in out.iter_mut().zip(row).zip(gain) {
        *o = x * inv * g;
    }
    inv
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f32]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = m(3, 2, &[1.0, -2.0, 3.5, 4.0, 0.25, 9.0]);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn hand_multiplication() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(
            matmul(&m(1, 1, &[2.0]), &m(1, 1, &[3.0])).unwrap().data(),
            &[6.0]
        );
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_row(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), [0.5, 0.5]);
        let p = softmax_row(&[5.0, 5.0], &[0.0, MASK_SENTINEL]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1] < 1e-6);
        assert_eq!(softmax_row(&[1.0], &[0.0]).unwrap(), [1.0]);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let err = softmax_row(&[1.0, 2.0], &[MASK_SENTINEL, MASK_SENTINEL]).unwrap_err();
        assert_eq!(err, TensorError::DegenerateRow);
    }

    #[test]
    fn rms_cases() {
        assert_eq!(
            rms_normalize(&[0.0; 4], &[1.0; 4], 1e-6).unwrap(),
            [0.0; 4]
        );
        let r = rms_normalize(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let s = libm::sqrtf(12.5);
        assert!((r[0] - 3.0 / s).abs() < 1e-6 && (r[0] - 0.8485).abs() < 1e-4);
        assert!((r[1] - 4.0 / s).abs() < 1e-6 && (r[1] - 1.1314).abs() < 1e-4);
        assert_eq!(
            rms_normalize(&[1.5, -2.0, 7.0], &[0.0; 3], 1e-6).unwrap(),
            [0.0; 3]
        );
    }
}
