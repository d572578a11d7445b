//! Primitive operations: forward evaluation and local backward rules.

use super::{Node, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(super) enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    SumAxis(usize, usize),
    LogSumExp(usize, Option<usize>),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    ConcatCols(usize, usize),
    MakeLower(usize, usize),
    SolveLower(usize, usize),
    Cholesky(usize),
}

/// Shapes of rank ≤ 2 viewed as `(rows, cols)`.
fn as2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() > 2 || b.len() > 2 {
        return None;
    }
    let (ra, ca) = as2(a);
    let (rb, cb) = as2(b);
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    let r = dim(ra, rb)?;
    let c = dim(ca, cb)?;
    Some(match a.len().max(b.len()) {
        0 => vec![],
        1 => vec![c],
        _ => vec![r, c],
    })
}

#[inline]
fn bidx(r: usize, c: usize, rows: usize, cols: usize) -> usize {
    (if rows == 1 { 0 } else { r }) * cols + if cols == 1 { 0 } else { c }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (gr, gc) = as2(g.shape());
    let (r, c) = as2(shape);
    let mut out = vec![0.0; r * c];
    let gd = g.data();
    for i in 0..gr {
        for j in 0..gc {
            out[bidx(i, j, r, c)] += gd[i * gc + j];
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Op {
    pub(super) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
    ) {
        let val = |id: usize| &nodes[id].value;
        let rg = |id: usize| nodes[id].requires_grad;
        match *self {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(a), val(b));
                let (gr, gc) = as2(g.shape());
                let (ar, ac) = as2(av.shape());
                let (br, bc) = as2(bv.shape());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if rg(a) {
                    let mut ga = vec![0.0; gr * gc];
                    for i in 0..gr {
                        for j in 0..gc {
                            let k = i * gc + j;
                            ga[k] = match kind {
                                Binary::Add | Binary::Sub => gd[k],
                                Binary::Mul => gd[k] * bd[bidx(i, j, br, bc)],
                                Binary::Div => gd[k] / bd[bidx(i, j, br, bc)],
                            };
                        }
                    }
                    let ga = Tensor::new(g.shape().to_vec(), ga).unwrap();
                    accumulate(adj, a, reduce_to(&ga, av.shape()));
                }
                if rg(b) {
                    let mut gb = vec![0.0; gr * gc];
                    for i in 0..gr {
                        for j in 0..gc {
                            let k = i * gc + j;
                            gb[k] = match kind {
                                Binary::Add => gd[k],
                                Binary::Sub => -gd[k],
                                Binary::Mul => gd[k] * ad[bidx(i, j, ar, ac)],
                                Binary::Div => {
                                    let y = bd[bidx(i, j, br, bc)];
                                    -gd[k] * ad[bidx(i, j, ar, ac)] / (y * y)
                                }
                            };
                        }
                    }
                    let gb = Tensor::new(g.shape().to_vec(), gb).unwrap();
                    accumulate(adj, b, reduce_to(&gb, bv.shape()));
                }
            }
            Op::Neg(a) => accumulate(adj, a, g.scale(-1.0)),
            Op::Exp(a) => accumulate(adj, a, g.zip_map(out, |g, y| g * y)),
            Op::Log(a) => accumulate(adj, a, g.zip_map(val(a), |g, x| g / x)),
            Op::Sigmoid(a) => accumulate(adj, a, g.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Softplus(a) => accumulate(adj, a, g.zip_map(val(a), |g, x| g * sigmoid(x))),
            Op::Square(a) => accumulate(adj, a, g.zip_map(val(a), |g, x| 2.0 * g * x)),
            Op::Scale(a, c) => accumulate(adj, a, g.scale(c)),
            Op::AddScalar(a) => accumulate(adj, a, g.clone()),
            Op::Sum(a) => {
                let s = g.item();
                accumulate(adj, a, Tensor::full(val(a).shape(), s));
            }
            Op::SumAxis(a, axis) => {
                let av = val(a);
                let (r, c) = (av.rows(), av.cols());
                let gd = g.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = if axis == 0 { gd[j] } else { gd[i] };
                    }
                }
                accumulate(adj, a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::LogSumExp(a, axis) => {
                let av = val(a);
                let (r, c) = as2(av.shape());
                let (od, gd, xd) = (out.data(), g.data(), av.data());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let o = match (axis, av.rank()) {
                            (None, _) | (Some(_), 1) => 0,
                            (Some(0), _) => j,
                            _ => i,
                        };
                        let k = i * c + j;
                        ga[k] = gd[o] * (xd[k] - od[o]).exp();
                    }
                }
                accumulate(adj, a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        Mat::new(g.data(), m, n, false),
                        Mat::new(bv.data(), k, n, true),
                        &mut ga,
                        false,
                    );
                    accumulate(adj, a, Tensor::matrix(m, k, ga).unwrap());
                }
                if rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        Mat::new(av.data(), m, k, true),
                        Mat::new(g.data(), m, n, false),
                        &mut gb,
                        false,
                    );
                    accumulate(adj, b, Tensor::matrix(k, n, gb).unwrap());
                }
            }
            Op::Transpose(a) => accumulate(adj, a, g.transpose()),
            Op::Reshape(a) => {
                let shape = val(a).shape().to_vec();
                accumulate(adj, a, g.clone().reshape(&shape).unwrap());
            }
            Op::SliceCols(a, start) => {
                let av = val(a);
                let (r, c) = (av.rows(), av.cols());
                let w = g.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                accumulate(adj, a, Tensor::matrix(r, c, ga).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let r = g.rows();
                if rg(a) {
                    let mut ga = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        ga.extend_from_slice(&g.row(i)[..ca]);
                    }
                    accumulate(adj, a, Tensor::matrix(r, ca, ga).unwrap());
                }
                if rg(b) {
                    let mut gb = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        gb.extend_from_slice(&g.row(i)[ca..]);
                    }
                    accumulate(adj, b, Tensor::matrix(r, cb, gb).unwrap());
                }
            }
            Op::MakeLower(off, logdiag) => {
                let n = out.rows();
                if rg(off) {
                    let mut go = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..i {
                            go[i * n + j] = g.at(i, j);
                        }
                    }
                    accumulate(adj, off, Tensor::matrix(n, n, go).unwrap());
                }
                if rg(logdiag) {
                    let gd = (0..n).map(|i| g.at(i, i) * out.at(i, i)).collect();
                    accumulate(adj, logdiag, Tensor::vector(gd));
                }
            }
            Op::SolveLower(l, b) => {
                let lv = val(l);
                // rows of L⁻ᵀ G
                let gb = tensor::solve_lower_t_rows(lv, g);
                if rg(l) {
                    let n = lv.rows();
                    let m = out.rows();
                    let mut gl = vec![0.0; n * n];
                    for r in 0..m {
                        let (gr, xr) = (gb.row(r), out.row(r));
                        for i in 0..n {
                            for j in 0..=i {
                                gl[i * n + j] -= gr[i] * xr[j];
                            }
                        }
                    }
                    accumulate(adj, l, Tensor::matrix(n, n, gl).unwrap());
                }
                if rg(b) {
                    accumulate(adj, b, gb);
                }
            }
            Op::Cholesky(a) => {
                let n = out.rows();
                // Φ(Lᵀ Ḡ): lower triangle with halved diagonal
                let mut p = out.transpose().matmul(g).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        let v = match i.cmp(&j) {
                            std::cmp::Ordering::Less => 0.0,
                            std::cmp::Ordering::Equal => 0.5 * p.at(i, j),
                            std::cmp::Ordering::Greater => p.at(i, j),
                        };
                        p.set(i, j, v);
                    }
                }
                // S = L⁻ᵀ P L⁻¹
                let y = tensor::solve_lower_t_rows(out, &p.transpose()); // rows: L⁻ᵀ pᵢ (cols of P)
                let s = tensor::solve_lower_t_rows(out, &y.transpose());
                // the forward pass reads only the lower triangle
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        ga[i * n + j] = if i == j {
                            s.at(i, i)
                        } else {
                            s.at(i, j) + s.at(j, i)
                        };
                    }
                }
                accumulate(adj, a, Tensor::matrix(n, n, ga).unwrap());
            }
        }
    }
}

impl<'t> Var<'t> {
    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(out, rg, op)
    }

    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        let tape = self.tape;
        let out = {
            let a = self.value();
            let b = other.value();
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let (r, c) = as2(&shape);
            let (ar, ac) = as2(a.shape());
            let (br, bc) = as2(b.shape());
            let (ad, bd) = (a.data(), b.data());
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let x = ad[bidx(i, j, ar, ac)];
                    let y = bd[bidx(i, j, br, bc)];
                    data.push(match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                        Binary::Div => {
                            if y == 0.0 {
                                return Err(Error::domain("div", "division by zero"));
                            }
                            x / y
                        }
                    });
                }
            }
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(tape.push(out, rg, Op::Binary(kind, self.id, other.id)))
    }

    /// Elementwise sum with broadcasting (scalar, row vector, or column).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("log", format!("non-positive operand {bad}")));
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// Sum of all entries (scalar result).
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), rg, Op::Sum(self.id))
    }

    /// Sum of a matrix over `axis` (0: down columns, 1: along rows).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.rank() != 2 || axis > 1 {
                return Err(Error::shape("sum_axis", a.shape(), &[axis]));
            }
            let (r, c) = (a.rows(), a.cols());
            let d = a.data();
            if axis == 0 {
                let mut s = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        s[j] += d[i * c + j];
                    }
                }
                Tensor::vector(s)
            } else {
                Tensor::vector((0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect())
            }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, rg, Op::SumAxis(self.id, axis)))
    }

    /// Max-shifted log-sum-exp over `axis`, or over everything when `None`.
    pub fn logsumexp(self, axis: Option<usize>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let d = a.data();
            match (axis, a.rank()) {
                (None, _) | (Some(0), 1) => Tensor::scalar(lse(d.iter().copied())),
                (Some(ax), 2) if ax < 2 => {
                    let (r, c) = (a.rows(), a.cols());
                    if ax == 0 {
                        Tensor::vector(
                            (0..c)
                                .map(|j| lse((0..r).map(|i| d[i * c + j])))
                                .collect(),
                        )
                    } else {
                        Tensor::vector(
                            (0..r)
                                .map(|i| lse(d[i * c..(i + 1) * c].iter().copied()))
                                .collect(),
                        )
                    }
                }
                _ => return Err(Error::shape("logsumexp", a.shape(), &[axis.unwrap_or(0)])),
            }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, rg, Op::LogSumExp(self.id, axis)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            a.matmul(&b)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, rg, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(Error::shape("transpose", a.shape(), &[]));
            }
            a.transpose()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, rg, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, rg, Op::Reshape(self.id)))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.rank() != 2 || start + len > a.cols() {
                return Err(Error::shape("slice_cols", a.shape(), &[start, len]));
            }
            let r = a.rows();
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&a.row(i)[start..start + len]);
            }
            Tensor::matrix(r, len, d)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, rg, Op::SliceCols(self.id, start)))
    }

    /// `[self | other]` for matrices with equal row counts.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
                return Err(Error::shape("concat_cols", a.shape(), b.shape()));
            }
            let r = a.rows();
            let mut d = Vec::with_capacity(r * (a.cols() + b.cols()));
            for i in 0..r {
                d.extend_from_slice(a.row(i));
                d.extend_from_slice(b.row(i));
            }
            Tensor::matrix(r, a.cols() + b.cols(), d)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, rg, Op::ConcatCols(self.id, other.id)))
    }
}

impl Tape {
    /// Lower-triangular matrix from an unconstrained square array (only its
    /// strictly-lower part is used) and a vector of log-diagonal entries.
    pub fn make_lower<'t>(&'t self, off: Var<'t>, logdiag: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let o = off.value();
            let d = logdiag.value();
            let n = d.len();
            if o.shape() != [n, n] || d.rank() != 1 {
                return Err(Error::shape("make_lower", o.shape(), d.shape()));
            }
            let mut l = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..i {
                    l[i * n + j] = o.at(i, j);
                }
                l[i * n + i] = d.data()[i].exp();
            }
            Tensor::matrix(n, n, l)?
        };
        let rg = off.requires_grad() || logdiag.requires_grad();
        Ok(self.push(out, rg, Op::MakeLower(off.id, logdiag.id)))
    }

    /// Row-wise triangular solve: row `r` of the result is `L⁻¹ bᵣ`.
    pub fn solve_lower<'t>(&'t self, l: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let lv = l.value();
            let bv = b.value();
            let n = lv.rows();
            if lv.rank() != 2 || lv.cols() != n || bv.rank() != 2 || bv.cols() != n {
                return Err(Error::shape("solve_lower", lv.shape(), bv.shape()));
            }
            if let Some(i) = (0..n).find(|&i| lv.at(i, i) == 0.0) {
                return Err(Error::domain("solve_lower", format!("zero pivot at {i}")));
            }
            tensor::solve_lower_rows(&lv, &bv)
        };
        let rg = l.requires_grad() || b.requires_grad();
        Ok(self.push(out, rg, Op::SolveLower(l.id, b.id)))
    }

    /// Lower Cholesky factor; reads only the lower triangle of `a`.
    pub fn cholesky<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let out = tensor::cholesky(&a.value())?;
        let rg = a.requires_grad();
        Ok(self.push(out, rg, Op::Cholesky(a.id)))
    }
}
