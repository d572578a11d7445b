//! Dense row-major `f64` arrays and the handful of linear-algebra kernels
//! the rest of the crate builds on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows", &[c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(r, c, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix (or 1 for a vector/scalar).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a matrix, length of a vector, 1 for a scalar.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(&self.data, m, k, false),
            Mat::new(&other.data, k, n, false),
            &mut out,
            false,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

/// A borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Mat<'a> {
    /// `rows`/`cols` describe the stored layout; `transposed` flips the logical view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

const PAR_MIN_ROWS: usize = 32;
const PAR_MIN_FLOPS: usize = 1 << 18;

/// `out (+)= op(a) · op(b)`, `out` row-major `m × n`. Splits rows across
/// threads when the product is large enough.
pub fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m * n * k >= PAR_MIN_FLOPS && m >= PAR_MIN_ROWS && par::threads() > 1 {
        gemm_parallel(a, b, out, accumulate);
    } else {
        gemm_sequential(a, b, out, accumulate);
    }
}

/// Single-threaded product; exposed for benchmarking.
pub fn gemm_sequential(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (_, n) = b.logical();
    gemm_rows(a, b, 0, m, out, k, n, accumulate);
}

/// Row-split product; exposed for benchmarking.
pub fn gemm_parallel(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (_, n) = b.logical();
    if n == 0 {
        return;
    }
    let threads = par::threads().max(1);
    let rows_per = m.div_ceil(threads * 2).max(8);
    par::for_each_chunk_mut(out, rows_per * n, |ci, chunk| {
        let r0 = ci * rows_per;
        let rows = chunk.len() / n;
        gemm_rows(a, b, r0, rows, chunk, k, n, accumulate);
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_rows(
    a: Mat<'_>,
    b: Mat<'_>,
    r0: usize,
    rows: usize,
    out: &mut [f64],
    k: usize,
    n: usize,
    accumulate: bool,
) {
    if rows == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    let offset = r0 as isize * rsa;
    // SAFETY: strides and extents describe in-bounds views of `a.data`,
    // `b.data` and `out`, which are live for the duration of the call.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a.data.as_ptr().offset(offset),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n {
        return Err(Error::shape("cholesky", a.shape(), a.shape()));
    }
    let mut l = vec![0.0; n * n];
    let src = a.data();
    for j in 0..n {
        let mut d = src[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = src[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `L x = b` for each row `b` of `rhs` (`rhs` is `m × n`).
pub fn solve_lower_rows(l: &Tensor, rhs: &Tensor) -> Tensor {
    let n = l.rows();
    let m = rhs.len() / n.max(1);
    let ld = l.data();
    let mut out = rhs.data().to_vec();
    for r in 0..m {
        let x = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= ld[i * n + k] * x[k];
            }
            x[i] = s / ld[i * n + i];
        }
    }
    Tensor {
        shape: rhs.shape.clone(),
        data: out,
    }
}

/// Solves `Lᵀ x = b` for each row `b` of `rhs`.
pub fn solve_lower_t_rows(l: &Tensor, rhs: &Tensor) -> Tensor {
    let n = l.rows();
    let m = rhs.len() / n.max(1);
    let ld = l.data();
    let mut out = rhs.data().to_vec();
    for r in 0..m {
        let x = &mut out[r * n..(r + 1) * n];
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= ld[k * n + i] * x[k];
            }
            x[i] = s / ld[i * n + i];
        }
    }
    Tensor {
        shape: rhs.shape.clone(),
        data: out,
    }
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let l = cholesky(a)?;
    let n = l.rows();
    // rows of the first solve form L⁻ᵀ; the second right-multiplies by L⁻¹
    let y = solve_lower_rows(&l, &Tensor::eye(n));
    let z = solve_lower_t_rows(&l, &y);
    Ok(z)
}

/// `log det A` for symmetric positive-definite `A`.
pub fn spd_logdet(a: &Tensor) -> Result<f64> {
    let l = cholesky(a)?;
    let n = l.rows();
    Ok((0..n).map(|i| 2.0 * l.at(i, i).ln()).sum())
}

/// Trace of a square matrix.
pub fn trace(a: &Tensor) -> f64 {
    (0..a.rows()).map(|i| a.at(i, i)).sum()
}
