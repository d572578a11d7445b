//! Numerical checks of the theory: Fisher divergence between priors, the
//! OOD generalization and semantic-dependency bounds, and empirical
//! identification metrics against a known ground truth.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::{cholesky, spd_inverse, trace, Tensor};

/// Central finite-difference step for Laplacians of analytic scores.
pub const LAPLACIAN_STEP: f64 = 1e-4;

/// Pairs sampled by [`dependency_sup`] unless told otherwise.
pub const DEFAULT_PAIRS: usize = 10_000;

/// Ridge weight in the canonical form of [`mixing_score`].
const MIXING_RIDGE: f64 = 1e-9;

/// Smoothness constants of a ground-truth CSG, with `σ_μ² = E[μᵀμ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    pub sigma_mu: f64,
    pub b_p: f64,
    pub b1_f_inv: f64,
    pub b1_g: f64,
    pub b1_log_p: f64,
    pub b2_f: f64,
    pub b2_g: f64,
    pub b2_log_p: f64,
    pub b3_f: f64,
    pub d_s: usize,
    pub d_v: usize,
}

impl BoundConstants {
    pub fn d(&self) -> usize {
        self.d_s + self.d_v
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("sigma_mu", self.sigma_mu),
            ("b_p", self.b_p),
            ("b1_f_inv", self.b1_f_inv),
            ("b1_g", self.b1_g),
            ("b1_log_p", self.b1_log_p),
            ("b2_f", self.b2_f),
            ("b2_g", self.b2_g),
            ("b2_log_p", self.b2_log_p),
            ("b3_f", self.b3_f),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::domain("bound constants", format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// `tr(−2Σ⁻¹ + Σ̃⁻¹ + Σ⁻¹Σ̃Σ⁻¹)`, i.e. `E_{N(0,Σ̃)}‖∇log(p̃/p)‖²`.
pub fn fisher_divergence_gaussian(sigma: &Tensor, sigma_test: &Tensor) -> Result<f64> {
    if sigma.shape() != sigma_test.shape() {
        return Err(Error::shape("fisher_divergence_gaussian", sigma.shape(), sigma_test.shape()));
    }
    let p = spd_inverse(sigma)?;
    let pt = spd_inverse(sigma_test)?;
    let sandwich = p.matmul(sigma_test)?.matmul(&p)?;
    Ok(-2.0 * trace(&p) + trace(&pt) + trace(&sandwich))
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        McEstimate {
            mean,
            std_error: (var / n as f64).sqrt(),
            samples: n,
        }
    }

    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// A score function `z ↦ ∇ log p(z)`.
pub type Score<'a> = &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync);

/// Score of `N(0, Σ)`: `z ↦ −Σ⁻¹z`.
pub fn gaussian_score(sigma: &Tensor) -> Result<impl Fn(&[f64]) -> Vec<f64> + Sync + Send> {
    let prec = spd_inverse(sigma)?;
    Ok(move |z: &[f64]| {
        (0..z.len())
            .map(|i| -prec.row(i).iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    })
}

/// `Δ log p(z)` as the divergence of the score, by central differences.
pub fn laplacian(score: Score<'_>, z: &[f64], step: f64) -> f64 {
    let mut zz = z.to_vec();
    let mut total = 0.0;
    for i in 0..z.len() {
        zz[i] = z[i] + step;
        let up = score(&zz)[i];
        zz[i] = z[i] - step;
        let dn = score(&zz)[i];
        zz[i] = z[i];
        total += (up - dn) / (2.0 * step);
    }
    total
}

fn per_sample<F>(samples: &Tensor, what: &str, f: F) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let n = samples.rows();
    if n == 0 {
        return Err(Error::Empty(format!("{what}: no samples")));
    }
    let values = par::map_indexed(n, |i| f(samples.row(i)));
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoordinate {
            coordinate: i,
            context: format!("{what} score at sample {i}"),
        });
    }
    Ok(McEstimate::from_values(&values))
}

/// Score-matching form `E_{p̃}[2Δlog p − Δlog p̃ + ‖∇log p‖²]` over samples
/// drawn from `p̃`.
pub fn fisher_divergence_score_matching(
    score_p: Score<'_>,
    score_test: Score<'_>,
    samples: &Tensor,
) -> Result<McEstimate> {
    per_sample(samples, "score matching", |z| {
        let g = score_p(z);
        2.0 * laplacian(score_p, z, LAPLACIAN_STEP) - laplacian(score_test, z, LAPLACIAN_STEP)
            + g.iter().map(|x| x * x).sum::<f64>()
    })
}

/// Direct form `E_{p̃}‖∇log p − ∇log p̃‖²` over samples drawn from `p̃`.
pub fn fisher_divergence_direct(
    score_p: Score<'_>,
    score_test: Score<'_>,
    samples: &Tensor,
) -> Result<McEstimate> {
    per_sample(samples, "direct fisher", |z| {
        let a = score_p(z);
        let b = score_test(z);
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum()
    })
}

/// `n` draws from `N(0, Σ)` as rows.
pub fn sample_gaussian(sigma: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let l = cholesky(sigma)?;
    let d = l.rows();
    let eps = Tensor::matrix(n, d, rng::normal_vec(rng, n * d))?;
    eps.matmul(&l.transpose())
}

/// Right-hand side of the expected OOD error bound,
/// `σ_μ⁴ B'⁴_{f⁻¹} B'²_g · E_{p̃}‖∇log(p/p̃)‖²`.
pub fn ood_error_bound(c: &BoundConstants, fisher: f64) -> Result<f64> {
    c.validate()?;
    if !(fisher >= 0.0) {
        return Err(Error::domain("ood_error_bound", format!("fisher divergence {fisher} < 0")));
    }
    Ok(c.sigma_mu.powi(4) * c.b1_f_inv.powi(4) * c.b1_g.powi(2) * fisher)
}

/// Threshold above which the learned and true CSGs are δ-semantic-dependent:
/// `σ_μ² B'²_{f⁻¹}(2B'_{log p}B'_g + B''_g + 3d B'_{f⁻¹}B''_f B'_g)`.
pub fn delta_bound(c: &BoundConstants) -> f64 {
    let d = c.d() as f64;
    c.sigma_mu.powi(2)
        * c.b1_f_inv.powi(2)
        * (2.0 * c.b1_log_p * c.b1_g + c.b2_g + 3.0 * d * c.b1_f_inv * c.b2_f * c.b1_g)
}

/// Invertible mechanism `f(z) = R₂ h(R₁ z)` with orthogonal `R₁, R₂` and the
/// odd map `h(u) = u + α tanh(u)` applied per coordinate.
///
/// Since `1 ≤ h' ≤ 1 + α`, the Jacobian of `f⁻¹` has spectral norm at most 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub r1: Tensor,
    pub r2: Tensor,
    pub alpha: f64,
}

impl Mechanism {
    pub fn random(d: usize, alpha: f64, rng: &mut Rng) -> Self {
        Mechanism {
            r1: random_rotation(d, rng),
            r2: random_rotation(d, rng),
            alpha,
        }
    }

    pub fn dim(&self) -> usize {
        self.r1.rows()
    }

    /// Applies `f` to each row of `z`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let u = z.matmul(&self.r1.transpose())?;
        let a = self.alpha;
        u.map(|x| x + a * x.tanh()).matmul(&self.r2.transpose())
    }

    /// Applies `f⁻¹` to each row of `x`.
    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        let u = x.matmul(&self.r2)?;
        let a = self.alpha;
        u.map(|y| h_inverse(y, a)).matmul(&self.r1)
    }
}

fn h_inverse(y: f64, alpha: f64) -> f64 {
    // h is increasing with h' ≥ 1, so Newton from y / (1 + α) converges fast;
    // the bracket guards the rare overshoot.
    let (mut lo, mut hi) = (y.min(y / (1.0 + alpha)), y.max(y / (1.0 + alpha)));
    let mut u = y / (1.0 + alpha);
    for _ in 0..100 {
        let t = u.tanh();
        let r = u + alpha * t - y;
        if r == 0.0 {
            break;
        }
        if r > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let mut next = u - r / (1.0 + alpha * (1.0 - t * t));
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() <= 1e-16 * (1.0 + u.abs()) {
            u = next;
            break;
        }
        u = next;
    }
    u
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn random_rotation(d: usize, rng: &mut Rng) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v = rng::normal_vec(rng, d);
        for b in &q {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&q).expect("square")
}

/// Logistic readout `P(y = 1 | s) = σ(wᵀs + b)` for two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Readout {
    /// `P(y = 1 | s)` per row of `s`.
    pub fn prob(&self, s: &Tensor) -> Vec<f64> {
        (0..s.rows())
            .map(|i| {
                let a: f64 = s.row(i).iter().zip(&self.w).map(|(x, w)| x * w).sum::<f64>() + self.b;
                1.0 / (1.0 + (-a).exp())
            })
            .collect()
    }

    /// Lipschitz constant of `s ↦ P(y = 1 | s)`.
    pub fn lipschitz(&self) -> f64 {
        0.25 * self.w.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Ground truth shared by the training and test domains: the mechanisms are
/// held by reference, only the prior covariance differs.
#[derive(Clone, Debug)]
pub struct GroundTruthHandles {
    pub mechanism: Arc<Mechanism>,
    pub readout: Arc<Readout>,
    pub sigma: Tensor,
    pub sigma_test: Tensor,
    pub sigma_mu: f64,
    pub d_s: usize,
}

impl GroundTruthHandles {
    pub fn d_v(&self) -> usize {
        self.mechanism.dim() - self.d_s
    }

    /// Checks positive definiteness and `f ∘ f⁻¹ = id` on prior samples.
    pub fn validate(&self, rng: &mut Rng) -> Result<()> {
        let z = sample_gaussian(&self.sigma, 256, rng)?;
        cholesky(&self.sigma_test)?;
        let back = self.mechanism.inverse(&self.mechanism.forward(&z)?)?;
        let err = back.zip_map(&z, |a, b| (a - b).abs()).max_abs();
        if err > 1e-8 {
            return Err(Error::domain("ground truth", format!("f⁻¹∘f round trip error {err:e}")));
        }
        Ok(())
    }

    /// Noise-free observations `f(s, v)`.
    pub fn observe(&self, s: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (n, d_s, d_v) = (s.rows(), s.cols(), v.cols());
        if v.rows() != n || d_s != self.d_s || d_v != self.d_v() {
            return Err(Error::shape("observe", s.shape(), v.shape()));
        }
        let mut z = Vec::with_capacity(n * (d_s + d_v));
        for i in 0..n {
            z.extend_from_slice(s.row(i));
            z.extend_from_slice(v.row(i));
        }
        self.mechanism.forward(&Tensor::matrix(n, d_s + d_v, z)?)
    }

    /// Ground-truth semantic readout `s = [f⁻¹(x)]_S`.
    pub fn s_readout(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.mechanism.inverse(x)?;
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i)[..self.d_s].to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Learned semantic encoder `x ↦ ŝ`, one row per input row.
pub type Encoder<'a> = &'a (dyn Fn(&Tensor) -> Result<Tensor> + Sync);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationMetrics {
    pub mixing_score: f64,
    pub dependency_sup: f64,
    pub pairs: usize,
}

fn centered(a: &Tensor) -> Tensor {
    let (n, d) = (a.rows(), a.cols());
    let mut out = a.clone();
    for j in 0..d {
        let m = (0..n).map(|i| a.at(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            out.set(i, j, a.at(i, j) - m);
        }
    }
    out
}

fn gram(a: &Tensor) -> Result<Tensor> {
    a.transpose().matmul(a)
}

/// Residual of the least-squares regression of `y` on the columns of `x`.
fn residual(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.cols() == 0 {
        return Ok(y.clone());
    }
    let mut g = gram(x)?;
    let jitter = 1e-12 * trace(&g).max(1e-300) / x.cols() as f64;
    for i in 0..x.cols() {
        let v = g.at(i, i) + jitter;
        g.set(i, i, v);
    }
    let beta = spd_inverse(&g)?.matmul(&x.transpose().matmul(y)?)?;
    Ok(y.zip_map(&x.matmul(&beta)?, |a, b| a - b))
}

/// Share of the learned semantic variation that is explained by `v*` once
/// `s*` has been regressed out, in `[0, 1]`.
///
/// With `R` the residual of `ŝ` on `s*` and `P` the projection onto the
/// residual of `v*` on `s*`, the score is
/// `tr((RᵀR + εĈ)⁻¹ RᵀPR) / dim ŝ`, the mean squared canonical correlation
/// regularized by the centered Gram matrix `Ĉ` of `ŝ`. Replacing `ŝ` with
/// `ŝA` for invertible `A` leaves it unchanged.
pub fn mixing_score(s_hat: &Tensor, s_true: &Tensor, v_true: &Tensor) -> Result<f64> {
    let n = s_hat.rows();
    let d_s = s_true.cols();
    if s_true.rows() != n || v_true.rows() != n {
        return Err(Error::shape("mixing_score", s_hat.shape(), s_true.shape()));
    }
    if n < 10 * d_s.max(1) {
        return Err(Error::domain(
            "mixing_score",
            format!("{n} rows is too few to regress out {d_s} semantic factors"),
        ));
    }
    if v_true.cols() == 0 || s_hat.cols() == 0 {
        return Ok(0.0);
    }
    let sh = centered(s_hat);
    let st = centered(s_true);
    let r = residual(&sh, &st)?;
    let w = residual(&centered(v_true), &st)?;
    let pr = w.matmul(&spd_inverse(&gram(&w)?)?.matmul(&w.transpose().matmul(&r)?)?)?;
    let num = r.transpose().matmul(&pr)?;
    let den = gram(&r)?.zip_map(&gram(&sh)?, |a, c| a + MIXING_RIDGE * c);
    let score = trace(&spd_inverse(&den)?.matmul(&num)?) / s_hat.cols() as f64;
    Ok(score.clamp(0.0, 1.0))
}

/// Largest `‖ŝ(f(s, v⁽¹⁾)) − ŝ(f(s, v⁽²⁾))‖₂` over `pairs` sampled triples of
/// rows, taking `s` from one row and `v⁽¹⁾, v⁽²⁾` from two others.
pub fn dependency_sup(
    gt: &GroundTruthHandles,
    encoder: Encoder<'_>,
    s_true: &Tensor,
    v_true: &Tensor,
    pairs: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let n = s_true.rows();
    if n == 0 || pairs == 0 {
        return Err(Error::Empty("dependency_sup: no pairs".into()));
    }
    let d_v = v_true.cols();
    let mut s = Vec::with_capacity(pairs * s_true.cols());
    let mut v1 = Vec::with_capacity(pairs * d_v);
    let mut v2 = Vec::with_capacity(pairs * d_v);
    for _ in 0..pairs {
        s.extend_from_slice(s_true.row(rng.random_range(0..n)));
        v1.extend_from_slice(v_true.row(rng.random_range(0..n)));
        v2.extend_from_slice(v_true.row(rng.random_range(0..n)));
    }
    let s = Tensor::matrix(pairs, s_true.cols(), s)?;
    let a = encoder(&gt.observe(&s, &Tensor::matrix(pairs, d_v, v1)?)?)?;
    let b = encoder(&gt.observe(&s, &Tensor::matrix(pairs, d_v, v2)?)?)?;
    Ok((0..pairs)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// Both identification proxies on an evaluation set with recorded latents.
pub fn identification_metrics(
    gt: &GroundTruthHandles,
    encoder: Encoder<'_>,
    x: &Tensor,
    s_true: &Tensor,
    v_true: &Tensor,
    pairs: usize,
    rng: &mut Rng,
) -> Result<IdentificationMetrics> {
    let s_hat = encoder(x)?;
    Ok(IdentificationMetrics {
        mixing_score: mixing_score(&s_hat, s_true, v_true)?,
        dependency_sup: dependency_sup(gt, encoder, s_true, v_true, pairs, rng)?,
        pairs,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// One-dimensional linear-Gaussian CSG: `s ~ N(0, var)`,
/// `x = gain·s + σ_μ ε`, `E[y|s] = Φ(slope·s)`.
///
/// Posteriors are Gaussian and `E[Φ(ws)]` under `N(m, τ²)` is
/// `Φ(wm / √(1 + w²τ²))`, so `E[y|x]` is exact in both domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian1d {
    pub gain: f64,
    pub slope: f64,
    pub var: f64,
    pub var_test: f64,
    pub sigma_mu: f64,
}

impl LinearGaussian1d {
    /// Posterior mean and variance of `s` given `x` under prior variance `var`.
    pub fn posterior(&self, x: f64, var: f64) -> (f64, f64) {
        let s2 = self.sigma_mu * self.sigma_mu;
        let tau2 = 1.0 / (1.0 / var + self.gain * self.gain / s2);
        (tau2 * self.gain * x / s2, tau2)
    }

    pub fn expected_y(&self, x: f64, var: f64) -> f64 {
        let (m, tau2) = self.posterior(x, var);
        let w = self.slope;
        normal_cdf(w * m / (1.0 + w * w * tau2).sqrt())
    }

    pub fn fisher(&self) -> Result<f64> {
        fisher_divergence_gaussian(&Tensor::eye(1).scale(self.var), &Tensor::eye(1).scale(self.var_test))
    }

    pub fn constants(&self) -> BoundConstants {
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        BoundConstants {
            sigma_mu: self.sigma_mu,
            b_p: 0.0,
            b1_f_inv: 1.0 / self.gain.abs(),
            b1_g: self.slope.abs() * phi0,
            b1_log_p: 0.0,
            b2_f: 0.0,
            b2_g: 0.0,
            b2_log_p: 0.0,
            b3_f: 0.0,
            d_s: 1,
            d_v: 0,
        }
    }

    /// `E_{p̃(x)} |E[y|x] − Ẽ[y|x]|²` by the trapezoid rule over `x`.
    pub fn ood_error(&self) -> f64 {
        let sd = (self.gain * self.gain * self.var_test + self.sigma_mu * self.sigma_mu).sqrt();
        let n = 40_000;
        let h = 24.0 * sd / n as f64;
        (0..=n)
            .map(|i| {
                let x = -12.0 * sd + i as f64 * h;
                let dens = (-0.5 * (x / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                let diff = self.expected_y(x, self.var) - self.expected_y(x, self.var_test);
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * h * dens * diff * diff
            })
            .sum()
    }

    pub fn bound(&self) -> Result<f64> {
        ood_error_bound(&self.constants(), self.fisher()?)
    }
}
