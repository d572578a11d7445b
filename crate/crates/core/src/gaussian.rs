//! Gaussian machinery: the block-Cholesky prior over `(s, v)`, diagonal
//! posteriors with reparameterized sampling, the additive-Gaussian image
//! likelihood and the categorical label likelihood.
//!
//! Every density has a graph form (operating on [`Var`]s, one datum per row)
//! used by the objectives, and a plain form on the value types which runs
//! the same graph code on a throwaway tape.

use std::cell::OnceCell;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{self, Tensor};

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Zero-mean Gaussian prior `p(s, v) = N(0, L Lᵀ)` with
/// `L = [[L_ss, 0], [M_vs, L_vv]]`.
///
/// `L_ss` and `L_vv` are stored as an unconstrained square array (only the
/// strictly-lower part is used) plus log-diagonal entries, so every
/// parameter value yields a valid covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCholeskyPrior {
    pub ss_off: Tensor,
    pub ss_logdiag: Tensor,
    pub vs: Tensor,
    pub vv_off: Tensor,
    pub vv_logdiag: Tensor,
}

/// `p(v | s)`: mean depends on `s`, covariance (and its factor) does not.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    pub mean: Vec<f64>,
    pub covariance: Tensor,
    pub cholesky: Tensor,
}

impl BlockCholeskyPrior {
    /// Standard normal prior.
    pub fn standard(d_s: usize, d_v: usize) -> Self {
        BlockCholeskyPrior {
            ss_off: Tensor::zeros(&[d_s, d_s]),
            ss_logdiag: Tensor::zeros(&[d_s]),
            vs: Tensor::zeros(&[d_v, d_s]),
            vv_off: Tensor::zeros(&[d_v, d_v]),
            vv_logdiag: Tensor::zeros(&[d_v]),
        }
    }

    /// Random unconstrained parameters, entries uniform in `±spread`.
    pub fn random(d_s: usize, d_v: usize, spread: f64, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-spread..spread)).collect(),
            )
            .unwrap()
        };
        BlockCholeskyPrior {
            ss_off: draw(&[d_s, d_s]),
            ss_logdiag: draw(&[d_s]),
            vs: draw(&[d_v, d_s]),
            vv_off: draw(&[d_v, d_v]),
            vv_logdiag: draw(&[d_v]),
        }
    }

    /// Builds the parameterization whose covariance is exactly `sigma`,
    /// splitting the first `d_s` coordinates off as `s`.
    pub fn from_covariance(sigma: &Tensor, d_s: usize) -> Result<Self> {
        let l = tensor::cholesky(sigma)?;
        let d = l.rows();
        let d_v = d - d_s;
        let mut p = Self::standard(d_s, d_v);
        for i in 0..d {
            for j in 0..=i {
                let x = l.at(i, j);
                match (i < d_s, j < d_s) {
                    (true, true) if i == j => p.ss_logdiag.data_mut()[i] = x.ln(),
                    (true, true) => p.ss_off.set(i, j, x),
                    (false, true) => p.vs.set(i - d_s, j, x),
                    (false, false) if i == j => p.vv_logdiag.data_mut()[i - d_s] = x.ln(),
                    (false, false) => p.vv_off.set(i - d_s, j - d_s, x),
                    (true, false) => unreachable!(),
                }
            }
        }
        Ok(p)
    }

    pub fn d_s(&self) -> usize {
        self.ss_logdiag.len()
    }

    pub fn d_v(&self) -> usize {
        self.vv_logdiag.len()
    }

    pub fn dim(&self) -> usize {
        self.d_s() + self.d_v()
    }

    pub fn parts(&self) -> [&Tensor; 5] {
        [&self.ss_off, &self.ss_logdiag, &self.vs, &self.vv_off, &self.vv_logdiag]
    }

    pub fn parts_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.ss_off,
            &mut self.ss_logdiag,
            &mut self.vs,
            &mut self.vv_off,
            &mut self.vv_logdiag,
        ]
    }

    fn tri(off: &Tensor, logdiag: &Tensor) -> Tensor {
        let n = logdiag.len();
        let mut l = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                l.set(i, j, off.at(i, j));
            }
            l.set(i, i, logdiag.data()[i].exp());
        }
        l
    }

    pub fn l_ss(&self) -> Tensor {
        Self::tri(&self.ss_off, &self.ss_logdiag)
    }

    pub fn l_vv(&self) -> Tensor {
        Self::tri(&self.vv_off, &self.vv_logdiag)
    }

    /// The full lower factor `L`.
    pub fn lower(&self) -> Tensor {
        let (ds, dv) = (self.d_s(), self.d_v());
        let d = ds + dv;
        let (lss, lvv) = (self.l_ss(), self.l_vv());
        let mut l = Tensor::zeros(&[d, d]);
        for i in 0..ds {
            for j in 0..=i {
                l.set(i, j, lss.at(i, j));
            }
        }
        for i in 0..dv {
            for j in 0..ds {
                l.set(ds + i, j, self.vs.at(i, j));
            }
            for j in 0..=i {
                l.set(ds + i, ds + j, lvv.at(i, j));
            }
        }
        l
    }

    /// `Σ = L Lᵀ`.
    pub fn covariance(&self) -> Tensor {
        let l = self.lower();
        l.matmul(&l.transpose()).unwrap()
    }

    /// `Σ_vv = L_vv L_vvᵀ + M_vs M_vsᵀ`.
    pub fn marginal_vv(&self) -> Tensor {
        let lvv = self.l_vv();
        let mut s = lvv.matmul(&lvv.transpose()).unwrap();
        s.add_assign(&self.vs.matmul(&self.vs.transpose()).unwrap());
        s
    }

    /// `Σ_ss = L_ss L_ssᵀ`.
    pub fn marginal_ss(&self) -> Tensor {
        let l = self.l_ss();
        l.matmul(&l.transpose()).unwrap()
    }

    /// `p(v|s) = N(M_vs L_ss⁻¹ s, L_vv L_vvᵀ)`.
    pub fn conditional_v_given_s(&self, s: &[f64]) -> Result<ConditionalGaussian> {
        if s.len() != self.d_s() {
            return Err(Error::shape("conditional_v_given_s", &[s.len()], &[self.d_s()]));
        }
        let u = tensor::solve_lower_rows(&self.l_ss(), &Tensor::vector(s.to_vec()));
        let mean = self
            .vs
            .matmul(&u.reshape(&[self.d_s(), 1])?)?
            .into_data();
        let l = self.l_vv();
        Ok(ConditionalGaussian {
            mean,
            covariance: l.matmul(&l.transpose())?,
            cholesky: l,
        })
    }

    fn eval<F>(&self, s: &[f64], v: &[f64], f: F) -> Result<f64>
    where
        F: for<'t> Fn(&PriorVars<'t>, Var<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        if s.len() != self.d_s() || v.len() != self.d_v() {
            return Err(Error::shape("prior", &[s.len(), v.len()], &[self.d_s(), self.d_v()]));
        }
        let tape = Tape::new();
        let pv = PriorVars::constant(&tape, self)?;
        let sv = tape.constant(Tensor::matrix(1, s.len(), s.to_vec())?);
        let vv = tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
        let out = f(&pv, sv, vv)?;
        let x = out.value().data()[0];
        Ok(x)
    }

    /// `log p(s, v)`.
    pub fn log_density(&self, s: &[f64], v: &[f64]) -> Result<f64> {
        self.eval(s, v, |p, s, v| p.log_density(s, v))
    }

    /// `log p(s)`.
    pub fn log_marginal_s(&self, s: &[f64]) -> Result<f64> {
        self.eval(s, &vec![0.0; self.d_v()], |p, s, _| p.log_marginal_s(s))
    }

    /// `log p(v)`.
    pub fn log_marginal_v(&self, v: &[f64]) -> Result<f64> {
        self.eval(&vec![0.0; self.d_s()], v, |p, _, v| p.log_marginal_v(v))
    }

    /// `log p(s,v) − log p(s) − log p(v)`, computed as `log p(v|s) − log p(v)`.
    pub fn log_density_ratio(&self, s: &[f64], v: &[f64]) -> Result<f64> {
        self.eval(s, v, |p, s, v| p.log_ratio(s, v))
    }

    /// Ancestral draw of `(s, v)`.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let l = self.lower();
        let e = rng::normal_vec(rng, self.dim());
        let z = l.matmul(&Tensor::matrix(self.dim(), 1, e).unwrap()).unwrap().into_data();
        let (s, v) = z.split_at(self.d_s());
        (s.to_vec(), v.to_vec())
    }
}

/// A [`BlockCholeskyPrior`] bound to a tape.
pub struct PriorVars<'t> {
    tape: &'t Tape,
    d_s: usize,
    d_v: usize,
    l_ss: Var<'t>,
    logdet_ss: Var<'t>,
    vv: Option<(Var<'t>, Var<'t>, Var<'t>)>,
    marginal_v: OnceCell<(Var<'t>, Var<'t>)>,
}

impl<'t> PriorVars<'t> {
    /// Binds `[ss_off, ss_logdiag, vs, vv_off, vv_logdiag]`.
    pub fn bind(tape: &'t Tape, parts: [Var<'t>; 5]) -> Result<Self> {
        let [ss_off, ss_logdiag, vs, vv_off, vv_logdiag] = parts;
        let d_s = ss_logdiag.shape()[0];
        let d_v = vv_logdiag.shape()[0];
        let l_ss = tape.make_lower(ss_off, ss_logdiag)?;
        let logdet_ss = ss_logdiag.sum();
        let vv = if d_v > 0 {
            if vs.shape() != [d_v, d_s] {
                return Err(Error::shape("prior", &vs.shape(), &[d_v, d_s]));
            }
            let l_vv = tape.make_lower(vv_off, vv_logdiag)?;
            Some((vs, l_vv, vv_logdiag.sum()))
        } else {
            None
        };
        Ok(PriorVars {
            tape,
            d_s,
            d_v,
            l_ss,
            logdet_ss,
            vv,
            marginal_v: OnceCell::new(),
        })
    }

    /// Binds a prior as constants.
    pub fn constant(tape: &'t Tape, prior: &BlockCholeskyPrior) -> Result<Self> {
        let p = prior.parts().map(|t| tape.constant(t.clone()));
        Self::bind(tape, p)
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    fn check(&self, x: Var<'t>, d: usize) -> Result<()> {
        let sh = x.shape();
        if sh.len() != 2 || sh[1] != d {
            return Err(Error::shape("prior", &sh, &[d]));
        }
        Ok(())
    }

    fn gauss_rows(&self, whitened: Var<'t>, logdet: Var<'t>, d: usize) -> Result<Var<'t>> {
        let quad = whitened.square().sum_axis(1)?.scale(-0.5);
        Ok(quad.sub(logdet)?.add_scalar(-(d as f64) * HALF_LN_2PI))
    }

    fn whiten_s(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.check(s, self.d_s)?;
        self.tape.solve_lower(self.l_ss, s)
    }

    /// Per-row `log p(s)`.
    pub fn log_marginal_s(&self, s: Var<'t>) -> Result<Var<'t>> {
        let u = self.whiten_s(s)?;
        self.gauss_rows(u, self.logdet_ss, self.d_s)
    }

    /// Per-row `log p(v | s)`; zero when there is no `v` block.
    pub fn log_conditional_v(&self, s: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let Some((vs, l_vv, logdet_vv)) = self.vv else {
            return self.zeros_like_rows(s);
        };
        self.check(v, self.d_v)?;
        let u_s = self.whiten_s(s)?;
        let mean = u_s.matmul(vs.transpose()?)?;
        let u_v = self.tape.solve_lower(l_vv, v.sub(mean)?)?;
        self.gauss_rows(u_v, logdet_vv, self.d_v)
    }

    /// Per-row `log p(s, v)`.
    pub fn log_density(&self, s: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        self.log_marginal_s(s)?.add(self.log_conditional_v(s, v)?)
    }

    /// Per-row `log p(v)` with `p(v) = N(0, L_vv L_vvᵀ + M_vs M_vsᵀ)`.
    pub fn log_marginal_v(&self, v: Var<'t>) -> Result<Var<'t>> {
        let Some((vs, l_vv, _)) = self.vv else {
            return self.zeros_like_rows(v);
        };
        self.check(v, self.d_v)?;
        let (c, logdet) = match self.marginal_v.get() {
            Some(m) => *m,
            None => {
                let cov = l_vv
                    .matmul(l_vv.transpose()?)?
                    .add(vs.matmul(vs.transpose()?)?)?;
                let c = self.tape.cholesky(cov)?;
                let eye = self.tape.constant(Tensor::eye(self.d_v));
                let logdet = c.mul(eye)?.sum_axis(1)?.log()?.sum();
                *self.marginal_v.get_or_init(|| (c, logdet))
            }
        };
        let w = self.tape.solve_lower(c, v)?;
        self.gauss_rows(w, logdet, self.d_v)
    }

    /// Per-row `log p(s,v)/(p(s) p(v)) = log p(v|s) − log p(v)`.
    pub fn log_ratio(&self, s: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        if self.vv.is_none() {
            return self.zeros_like_rows(s);
        }
        self.log_conditional_v(s, v)?.sub(self.log_marginal_v(v)?)
    }

    /// Per-row `log p(s) + log p(v)`.
    pub fn log_independent(&self, s: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        self.log_marginal_s(s)?.add(self.log_marginal_v(v)?)
    }

    fn zeros_like_rows(&self, x: Var<'t>) -> Result<Var<'t>> {
        let rows = x.shape().first().copied().unwrap_or(1);
        Ok(self.tape.constant(Tensor::zeros(&[rows])))
    }
}

/// Diagonal Gaussian `N(mean, diag(scale²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(Error::shape("diag_gaussian", &[mean.len()], &[scale.len()]));
        }
        if let Some(bad) = scale.iter().find(|&&s| !(s >= 0.0)) {
            return Err(Error::domain("diag_gaussian", format!("scale {bad}")));
        }
        Ok(DiagGaussian { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + scale ⊙ ε` together with the noise `ε`.
    pub fn rsample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let eps = rng::normal_vec(rng, self.dim());
        let z = self
            .mean
            .iter()
            .zip(&self.scale)
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        (z, eps)
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::shape("diag_log_prob", &[z.len()], &[self.dim()]));
        }
        let tape = Tape::new();
        let row = |x: &[f64]| tape.constant(Tensor::matrix(1, x.len(), x.to_vec()).unwrap());
        let lp = diag_log_prob(row(&self.mean), row(&self.scale), row(z))?;
        let v = lp.value().data()[0];
        Ok(v)
    }
}

/// Reparameterized sample `mean + scale ⊙ ε` with `ε` drawn into a constant.
pub fn diag_rsample<'t>(mean: Var<'t>, scale: Var<'t>, rng: &mut Rng) -> Result<(Var<'t>, Tensor)> {
    let shape = mean.shape();
    let n = shape.iter().product();
    let eps = Tensor::new(shape, rng::normal_vec(rng, n))?;
    let e = mean.tape().constant(eps.clone());
    Ok((mean.add(scale.mul(e)?)?, eps))
}

/// Per-row `Σᵢ −½ln(2π) − ln scaleᵢ − ½((zᵢ − meanᵢ)/scaleᵢ)²`.
pub fn diag_log_prob<'t>(mean: Var<'t>, scale: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let d = *mean.shape().last().unwrap_or(&1);
    let std = z.sub(mean)?.div(scale)?;
    let quad = std.square().sum_axis(1)?.scale(-0.5);
    let logs = scale.log()?.sum_axis(1)?;
    Ok(quad.sub(logs)?.add_scalar(-(d as f64) * HALF_LN_2PI))
}

/// `p(x | s, v) = N(x | f(s, v), σ_x² I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveGaussianLikelihood {
    pub sigma_x: f64,
}

impl AdditiveGaussianLikelihood {
    pub fn new(sigma_x: f64) -> Result<Self> {
        if !(sigma_x > 0.0) {
            return Err(Error::domain("likelihood", format!("sigma_x = {sigma_x}")));
        }
        Ok(AdditiveGaussianLikelihood { sigma_x })
    }

    /// Per-row log-likelihood of `x` under the decoder mean `mean`.
    pub fn log_prob<'t>(&self, x: Var<'t>, mean: Var<'t>) -> Result<Var<'t>> {
        let d = *x.shape().last().unwrap_or(&1) as f64;
        let inv = 1.0 / (self.sigma_x * self.sigma_x);
        let sq = x.sub(mean)?.square().sum_axis(1)?.scale(-0.5 * inv);
        Ok(sq.add_scalar(-d * (self.sigma_x.ln() + HALF_LN_2PI)))
    }

    /// `σ_μ² = E[μᵀμ] = D σ_x²` for `D`-dimensional observations.
    pub fn sigma_mu(&self, dim: usize) -> f64 {
        self.sigma_x * (dim as f64).sqrt()
    }
}

/// `p(y|s) = Cat(y | softmax(g(s)))`: row-wise log-probabilities of logits.
pub fn log_softmax<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let sh = logits.shape();
    let norm = logits.logsumexp(Some(1))?.reshape(&[sh[0], 1])?;
    logits.sub(norm)
}

/// Class probabilities from a logit row, normalized in log domain.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| (x - lse).exp()).collect()
}

/// Log-density of `N(0, Σ)` evaluated densely; used by the theory module.
pub fn dense_log_density(sigma: &Tensor, z: &[f64]) -> Result<f64> {
    let l = tensor::cholesky(sigma)?;
    let w = tensor::solve_lower_rows(&l, &Tensor::vector(z.to_vec()));
    let logdet: f64 = (0..l.rows()).map(|i| l.at(i, i).ln()).sum();
    let d = z.len() as f64;
    Ok(-0.5 * w.data().iter().map(|x| x * x).sum::<f64>() - logdet - 0.5 * d * (2.0 * PI).ln())
}
