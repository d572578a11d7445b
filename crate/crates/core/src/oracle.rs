//! Independent reference computations for tests: Gauss-Jordan inversion,
//! LU determinants and dense Gaussian densities that share no code with
//! the Cholesky-based paths they check.

use crate::tensor::Tensor;

pub fn gj_inverse(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().partial_cmp(&m[y][c].abs()).unwrap())
            .unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for x in m[c].iter_mut() {
            *x /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    let src = m[c].clone();
                    for (x, s) in m[r].iter_mut().zip(src) {
                        *x -= f * s;
                    }
                }
            }
        }
    }
    let rows: Vec<Vec<f64>> = m.into_iter().map(|r| r[n..].to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn lu_det(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().partial_cmp(&m[y][c].abs()).unwrap())
            .unwrap();
        if p != c {
            m.swap(c, p);
            det = -det;
        }
        det *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    det
}

pub fn submatrix(a: &Tensor, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Tensor {
    let data: Vec<Vec<f64>> = rows
        .map(|i| cols.clone().map(|j| a.at(i, j)).collect())
        .collect();
    Tensor::from_rows(&data).unwrap()
}

/// `log N(z | 0, Σ)` via explicit inverse and determinant.
pub fn dense_gaussian_logpdf(sigma: &Tensor, z: &[f64]) -> f64 {
    let inv = gj_inverse(sigma);
    let n = z.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += z[i] * inv.at(i, j) * z[j];
        }
    }
    -0.5 * q - 0.5 * lu_det(sigma).ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

pub fn mat_sub(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x - y)
}
