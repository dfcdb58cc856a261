//! Dense row-major matrices and the handful of kernels the model needs.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n` given as raw row-major slices.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c`, checked by the callers'
    // shape assertions; `c` is a distinct mutable buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x·w` for `x: n×in`, `w: in×out` (row-major), plus an optional bias row.
pub fn linear(x: &[f64], n: usize, w: &[f64], bias: Option<&[f64]>, d_in: usize, d_out: usize) -> Vec<f64> {
    assert_eq!(x.len(), n * d_in);
    assert_eq!(w.len(), d_in * d_out);
    let mut y = vec![0.0; n * d_out];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(n, d_in, d_out, 1.0, x, d_in as isize, 1, w, d_out as isize, 1, beta, &mut y);
    y
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    dy: &[f64],
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    assert_eq!(dy.len(), n * d_out);
    // dw (in×out) += xᵀ (in×n) · dy (n×out)
    gemm(d_in, n, d_out, 1.0, x, 1, d_in as isize, dy, d_out as isize, 1, 1.0, dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(d_out) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    let mut dx = vec![0.0; n * d_in];
    // dx (n×in) = dy (n×out) · wᵀ (out×in)
    gemm(n, d_out, d_in, 1.0, dy, d_out as isize, 1, w, 1, d_out as isize, 0.0, &mut dx);
    dx
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / xs.len() as f64;
        xs.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    xs.iter_mut().for_each(|v| *v /= sum);
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Rounds every entry to the nearest `f32`, so that storage in single precision is lossless.
pub fn quantize_f32(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
