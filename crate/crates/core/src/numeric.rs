//! Dense numeric kernels: matrix multiply, row softmax, layer norm and a
//! seeded generator. Everything here is deterministic; the parallel paths
//! write disjoint output rows so they are bitwise identical to the
//! sequential fallback.

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-major dense matrix with 32-bit float entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vcat(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vcat: column mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copy of the row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::shape(format!(
                "row slice {}..{} out of {} rows",
                start, end, self.rows
            )));
        }
        Matrix::new(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("add: shape mismatch"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// One output row of a product: accumulates over k in ascending order with a
/// scalar f32 accumulator, the order every other path must reproduce.
fn matmul_row(a_row: &[f32], b: &Matrix, out: &mut [f32]) {
    let k_len = a_row.len();
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for k in 0..k_len {
            acc += a_row[k] * b.data[k * b.cols + j];
        }
        *slot = acc;
    }
}

fn check_matmul_dims(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Sequential matrix product. Always available; `matmul` must agree with it
/// bitwise.
pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_matmul_dims(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let (row_in, row_out) = (a.row(i), out.row_mut(i));
        matmul_row(row_in, b, row_out);
    }
    Ok(out)
}

/// Matrix product, data-parallel over output rows when the `parallel`
/// feature is enabled.
#[cfg(feature = "parallel")]
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_matmul_dims(a, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    let cols = out.cols;
    out.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row_out)| matmul_row(a.row(i), b, row_out));
    Ok(out)
}

#[cfg(not(feature = "parallel"))]
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_seq(a, b)
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row layer normalization followed by the affine `gain, bias`.
pub fn layer_norm(x: &Matrix, gain: &[f32], bias: &[f32], eps: f32) -> Result<Matrix> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::shape(format!(
            "layer_norm: gain/bias length {}/{} != {} cols",
            gain.len(),
            bias.len(),
            x.cols
        )));
    }
    let mut out = x.clone();
    let n = x.cols as f32;
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let mut mean = 0.0f32;
        for v in row.iter() {
            mean += *v;
        }
        mean /= n;
        let mut var = 0.0f32;
        for v in row.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// SplitMix64 stream. Chosen for the repo because its output is pure 64-bit
/// integer arithmetic, so a seed fixes the stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller on a fixed-order uniform pair.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform().max(f64::MIN_POSITIVE);
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Deterministic pseudo-normal matrix with entries scaled by `scale`.
pub fn seeded_normal(rng: &mut Rng, rows: usize, cols: usize, scale: f32) -> Result<Matrix> {
    if scale <= 0.0 {
        return Err(Error::config("seeded_normal: scale must be positive"));
    }
    let data = (0..rows * cols)
        .map(|_| (rng.next_normal() * scale as f64) as f32)
        .collect();
    Matrix::new(rows, cols, data)
}
