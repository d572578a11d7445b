//! Training objectives and prediction rules.
//!
//! Every labeled objective (CSG, CSG-ind, the training-domain part of
//! CSG-DA and their CSGz counterparts) has the same Monte-Carlo shape. With
//! `K` reparameterized draws `(s_k, v_k)` from the encoder posterior,
//!
//! ```text
//! a_k = log p(y|s_k)
//! r_k = log p(s_k,v_k) − log p°(s_k,v_k)              importance log-ratio
//! b_k = log p°(s_k,v_k) + log p(x|s_k,v_k) − log q(s_k,v_k|x)
//!
//! supervision = logsumexp_k(r_k + a_k) − log K         log q(y|x) or log π(y|x)
//! elbo        = Σ_k softmax_k(r + a) · b_k
//! objective   = mean over the batch of supervision + elbo_weight · elbo
//! ```
//!
//! where the reference prior `p°` is `p` itself (CSG, `r ≡ 0`), the
//! independent prior `p(s)p(v)` (CSG-ind) or the learned test prior `p̃`
//! (CSG-DA). The self-normalized weights `softmax(r + a)` are the Monte-Carlo
//! form of `(1/π) · (p/p°) · p(y|s)`.
//!
//! CSGz is the same model with no `v` block: the latent `z` plays the role
//! of `s`, so its objectives are the ones above evaluated with `d_v = 0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{log_softmax, PriorVars, HALF_LN_2PI};
use crate::model::{class_log_probs, Bound, CsgModel, Group, Mlp, Posterior};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "csg")]
    Csg,
    #[serde(rename = "csg-ind")]
    CsgInd,
    #[serde(rename = "csg-da")]
    CsgDa,
    #[serde(rename = "csgz")]
    Csgz,
    #[serde(rename = "csgz-da")]
    CsgzDa,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Ce,
        VariantKind::Csg,
        VariantKind::CsgInd,
        VariantKind::CsgDa,
        VariantKind::Csgz,
        VariantKind::CsgzDa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Ce => "ce",
            VariantKind::Csg => "csg",
            VariantKind::CsgInd => "csg-ind",
            VariantKind::CsgDa => "csg-da",
            VariantKind::Csgz => "csgz",
            VariantKind::CsgzDa => "csgz-da",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown variant `{s}`")))
    }

    pub fn is_adaptation(self) -> bool {
        matches!(self, VariantKind::CsgDa | VariantKind::CsgzDa)
    }

    pub fn is_generative(self) -> bool {
        self != VariantKind::Ce
    }

    /// CSGz variants have no `v` block.
    pub fn has_v(self) -> bool {
        matches!(self, VariantKind::Csg | VariantKind::CsgInd | VariantKind::CsgDa)
    }

    /// Model selection goes through normalized `π(y|x)`.
    pub fn validates_with_pi(self) -> bool {
        matches!(self, VariantKind::CsgInd | VariantKind::CsgDa | VariantKind::CsgzDa)
    }

    /// The reference prior of the labeled objective.
    pub fn reference(self) -> Reference {
        match self {
            VariantKind::CsgInd => Reference::Independent,
            VariantKind::CsgDa | VariantKind::CsgzDa => Reference::Learned,
            _ => Reference::Training,
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which prior `p°` the labeled objective's posterior targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// `p` itself.
    Training,
    /// `p(s) p(v)`.
    Independent,
    /// The test-domain prior `p̃`.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Multiplier on the unsupervised (ELBO) term.
    pub elbo_weight: f64,
    /// Multiplier on the test-domain ELBO (adaptation only).
    pub adaptation_weight: f64,
    /// Reparameterized draws per datum.
    pub n_mc: usize,
    /// Evaluate at the posterior mean instead of sampling.
    pub use_posterior_mean: bool,
    /// Let the test-domain ELBO update the decoder as well.
    pub train_decoder_on_target: bool,
    /// Normalize `π(y|x)` over classes in the supervision term.
    pub normalize_pi: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            elbo_weight: 1e-4,
            adaptation_weight: 1e-4,
            n_mc: 1,
            use_posterior_mean: false,
            train_decoder_on_target: false,
            normalize_pi: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.elbo_weight >= 0.0 && self.adaptation_weight >= 0.0) {
            return Err(Error::Contract("objective weights must be nonnegative".into()));
        }
        if self.n_mc == 0 {
            return Err(Error::Contract("n_mc must be at least 1".into()));
        }
        Ok(())
    }
}

/// Standard-normal noise for every draw: `s[k]` is `[batch, d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub s: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Noise {
    pub fn draw(rng: &mut Rng, cfg: &ObjectiveConfig, batch: usize, d_s: usize, d_v: usize) -> Self {
        if cfg.use_posterior_mean {
            return Self::zeros(batch, d_s, d_v);
        }
        let mut gen = |d: usize| Tensor::matrix(batch, d, rng::normal_vec(rng, batch * d)).unwrap();
        let mut s = Vec::with_capacity(cfg.n_mc);
        let mut v = Vec::with_capacity(cfg.n_mc);
        for _ in 0..cfg.n_mc {
            s.push(gen(d_s));
            v.push(gen(d_v));
        }
        Noise { s, v }
    }

    /// A single noise-free draw: evaluation at the posterior mean.
    pub fn zeros(batch: usize, d_s: usize, d_v: usize) -> Self {
        Noise {
            s: vec![Tensor::zeros(&[batch, d_s])],
            v: vec![Tensor::zeros(&[batch, d_v])],
        }
    }

    pub fn for_model(rng: &mut Rng, cfg: &ObjectiveConfig, model: &CsgModel, batch: usize) -> Self {
        Self::draw(rng, cfg, batch, model.arch.d_s, model.arch.d_v)
    }

    pub fn n_mc(&self) -> usize {
        self.s.len()
    }
}

/// Per-datum values of the two terms, each of shape `[batch]`.
#[derive(Clone, Copy, Debug)]
pub struct Terms<'t> {
    pub supervision: Var<'t>,
    pub elbo: Var<'t>,
}

struct Draw<'t> {
    s: Var<'t>,
    v: Var<'t>,
    log_q: Var<'t>,
}

fn reparam<'t>(mean: Var<'t>, scale: Var<'t>, eps: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
    let tape = mean.tape();
    let sh = mean.shape();
    if eps.shape() != sh.as_slice() {
        return Err(Error::shape("noise", eps.shape(), &sh));
    }
    let z = mean.add(scale.mul(tape.constant(eps.clone()))?)?;
    // log N(z; mean, scale²) with (z − mean)/scale = eps held fixed
    let quad: Vec<f64> = (0..sh[0])
        .map(|i| -0.5 * eps.row(i).iter().map(|e| e * e).sum::<f64>() - sh[1] as f64 * HALF_LN_2PI)
        .collect();
    let log_q = tape.constant(Tensor::vector(quad)).sub(scale.log()?.sum_axis(1)?)?;
    Ok((z, log_q))
}

fn draw<'t>(q: &Posterior<'t>, noise: &Noise, k: usize) -> Result<Draw<'t>> {
    let (s, mut log_q) = reparam(q.s_mean, q.s_scale, &noise.s[k])?;
    let v = match (q.v_mean, q.v_scale) {
        (Some(m), Some(sc)) => {
            let (v, lq) = reparam(m, sc, &noise.v[k])?;
            log_q = log_q.add(lq)?;
            v
        }
        _ => s.tape().constant(Tensor::zeros(&[s.shape()[0], 0])),
    };
    Ok(Draw { s, v, log_q })
}

fn v_opt<'t>(model: &CsgModel, v: Var<'t>) -> Option<Var<'t>> {
    (model.arch.d_v > 0).then_some(v)
}

fn check_batch(x: Var<'_>, noise: &Noise) -> Result<usize> {
    let b = x.shape()[0];
    if noise.n_mc() == 0 || noise.s.len() != noise.v.len() {
        return Err(Error::Contract("noise must hold at least one draw".into()));
    }
    if noise.s[0].rows() != b {
        return Err(Error::shape("noise", noise.s[0].shape(), &[b]));
    }
    Ok(b)
}

fn columns<'t>(cols: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = cols[0].shape()[0];
    let mut out = cols[0].reshape(&[n, 1])?;
    for c in &cols[1..] {
        out = out.concat_cols(c.reshape(&[n, 1])?)?;
    }
    Ok(out)
}

/// Per-row `logsumexp(w) − log K` and `Σ_k softmax_k(w) b_k`.
fn weighted<'t>(w: Vec<Var<'t>>, b: Vec<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
    if w.len() == 1 {
        return Ok((w[0], b[0]));
    }
    let n = w.len();
    let (w, b) = (columns(w)?, columns(b)?);
    let rows = w.shape()[0];
    let lse = w.logsumexp(Some(1))?;
    let weights = w.sub(lse.reshape(&[rows, 1])?)?.exp();
    let elbo = weights.mul(b)?.sum_axis(1)?;
    Ok((lse.add_scalar(-(n as f64).ln()), elbo))
}

/// Per-datum terms of the labeled objective targeting `reference`. With
/// `normalize` the supervision is `log π(y|x) − log Σ_y' π(y'|x)`.
pub fn labeled_terms<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    noise: &Noise,
    reference: Reference,
    normalize: bool,
) -> Result<Terms<'t>> {
    check_batch(x, noise)?;
    let q = model.encode(p, x)?;
    let prior = model.prior_vars(p)?;
    let tilde = match reference {
        Reference::Learned => Some(model.test_prior_vars(p)?),
        _ => None,
    };
    let mut ws = Vec::with_capacity(noise.n_mc());
    let mut bs = Vec::with_capacity(noise.n_mc());
    let mut all: Option<Var<'t>> = None;
    for k in 0..noise.n_mc() {
        let d = draw(&q, noise, k)?;
        let logits = model.logits(p, d.s)?;
        let a = class_log_probs(logits, y)?;
        let mean = model.decode(p, d.s, v_opt(model, d.v))?;
        let lik = model.likelihood.log_prob(x, mean)?;
        let (r, joint) = match (reference, &tilde) {
            (Reference::Training, _) => (None, prior.log_density(d.s, d.v)?),
            (Reference::Independent, _) => (
                Some(prior.log_ratio(d.s, d.v)?),
                prior.log_independent(d.s, d.v)?,
            ),
            (Reference::Learned, Some(t)) => {
                let lt = t.log_density(d.s, d.v)?;
                (Some(prior.log_density(d.s, d.v)?.sub(lt)?), lt)
            }
            (Reference::Learned, None) => unreachable!(),
        };
        ws.push(match r {
            Some(r) => {
                if normalize {
                    let n = r.shape()[0];
                    let w = log_softmax(logits)?.add(r.reshape(&[n, 1])?)?;
                    all = Some(match all {
                        Some(c) => c.concat_cols(w)?,
                        None => w,
                    });
                }
                r.add(a)?
            }
            None => a,
        });
        bs.push(joint.add(lik)?.sub(d.log_q)?);
    }
    let (mut supervision, elbo) = weighted(ws, bs)?;
    if let Some(all) = all {
        // Both sides carry the same `− log K`, so it cancels.
        let z = all.logsumexp(Some(1))?.add_scalar(-(noise.n_mc() as f64).ln());
        supervision = supervision.sub(z)?;
    }
    Ok(Terms { supervision, elbo })
}

/// Per-datum test-domain ELBO `E_q̃[log p̃(s,v) + log p(x|s,v) − log q̃(s,v|x)]`.
///
/// `decoder` supplies the decoder weights, so binding them as constants
/// keeps this term from training the shared mechanism.
pub fn test_elbo_terms<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    decoder: &Bound<'t>,
    x: Var<'t>,
    noise: &Noise,
) -> Result<Var<'t>> {
    let q = model.encode(p, x)?;
    test_elbo_with(model, p, decoder, x, &q, noise)
}

/// [`test_elbo_terms`] for a given posterior `q̃(s,v|x)`.
pub fn test_elbo_with<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    decoder: &Bound<'t>,
    x: Var<'t>,
    q: &Posterior<'t>,
    noise: &Noise,
) -> Result<Var<'t>> {
    check_batch(x, noise)?;
    let tilde = model.test_prior_vars(p)?;
    let mut total: Option<Var<'t>> = None;
    for k in 0..noise.n_mc() {
        let d = draw(q, noise, k)?;
        let mean = model.decode(decoder, d.s, v_opt(model, d.v))?;
        let lik = model.likelihood.log_prob(x, mean)?;
        let b = tilde.log_density(d.s, d.v)?.add(lik)?.sub(d.log_q)?;
        total = Some(match total {
            Some(t) => t.add(b)?,
            None => b,
        });
    }
    Ok(total.unwrap().scale(1.0 / noise.n_mc() as f64))
}

fn batch_mean<'t>(v: Var<'t>, term: &'static str) -> Result<Var<'t>> {
    let n = v.shape()[0] as f64;
    let m = v.sum().scale(1.0 / n);
    let value = m.item();
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective { term, value });
    }
    Ok(m)
}

fn reduce<'t>(terms: Terms<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let sup = batch_mean(terms.supervision, "supervision")?;
    let elbo = batch_mean(terms.elbo, "elbo")?;
    sup.add(elbo.scale(cfg.elbo_weight))
}

/// CSG objective: `log q(y|x) + w · (1/q(y|x)) E_q[p(y|s) log(p(s,v)p(x|s,v)/q(s,v|x))]`.
pub fn csg_objective<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    noise: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    reduce(labeled_terms(model, p, x, y, noise, Reference::Training, cfg.normalize_pi)?, cfg)
}

/// CSG-ind objective with the independent prior `p(s)p(v)`.
pub fn csg_ind_objective<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    noise: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    reduce(labeled_terms(model, p, x, y, noise, Reference::Independent, cfg.normalize_pi)?, cfg)
}

/// Training-domain CSG-DA objective with `π(y|x) = E_q̃[(p/p̃) p(y|s)]`.
pub fn csg_da_train_objective<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    noise: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    reduce(labeled_terms(model, p, x, y, noise, Reference::Learned, cfg.normalize_pi)?, cfg)
}

/// Batch mean of the test-domain ELBO.
pub fn csg_da_test_elbo<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    noise: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    let frozen;
    let decoder = if cfg.train_decoder_on_target {
        p
    } else {
        frozen = model.params.detach_group(p, Group::Decoder);
        &frozen
    };
    batch_mean(test_elbo_terms(model, p, decoder, x, noise)?, "test elbo")
}

/// The summed CSG-DA step objective: training part plus
/// `adaptation_weight` times the test-domain ELBO.
#[allow(clippy::too_many_arguments)]
pub fn csg_da_objective<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    x_test: Var<'t>,
    noise: &Noise,
    noise_test: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    let train = csg_da_train_objective(model, p, x, y, noise, cfg)?;
    let test = csg_da_test_elbo(model, p, x_test, noise_test, cfg)?;
    train.add(test.scale(cfg.adaptation_weight))
}

/// CSGz objectives: the CSG objective over `z` alone, or with `x_test`
/// the CSGz-DA pair.
#[allow(clippy::too_many_arguments)]
pub fn csgz_objective<'t>(
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    adaptation: Option<(Var<'t>, &Noise)>,
    noise: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    if model.arch.d_v != 0 {
        return Err(Error::Contract("CSGz requires a model without a v block".into()));
    }
    match adaptation {
        None => csg_objective(model, p, x, y, noise, cfg),
        Some((xt, nt)) => csg_da_objective(model, p, x, y, xt, noise, nt, cfg),
    }
}

/// The objective of `variant` on one step's batches.
#[allow(clippy::too_many_arguments)]
pub fn variant_objective<'t>(
    variant: VariantKind,
    model: &CsgModel,
    p: &Bound<'t>,
    x: Var<'t>,
    y: &[usize],
    adaptation: Option<(Var<'t>, &Noise)>,
    noise: &Noise,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    match variant {
        VariantKind::Ce => Err(Error::Contract("CE is not a generative objective".into())),
        VariantKind::Csg => csg_objective(model, p, x, y, noise, cfg),
        VariantKind::CsgInd => csg_ind_objective(model, p, x, y, noise, cfg),
        VariantKind::CsgDa => {
            let (xt, nt) = adaptation.ok_or_else(|| no_target_batch(variant))?;
            csg_da_objective(model, p, x, y, xt, noise, nt, cfg)
        }
        VariantKind::Csgz => csgz_objective(model, p, x, y, None, noise, cfg),
        VariantKind::CsgzDa => {
            let a = adaptation.ok_or_else(|| no_target_batch(variant))?;
            csgz_objective(model, p, x, y, Some(a), noise, cfg)
        }
    }
}

fn no_target_batch(v: VariantKind) -> Error {
    Error::Contract(format!("{v} needs an unlabeled test-domain batch"))
}

/// Mean log-likelihood of the labels under the baseline MLP.
pub fn ce_objective<'t>(mlp: &Mlp, p: &Bound<'t>, x: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
    batch_mean(class_log_probs(mlp.logits(p, x)?, y)?, "supervision")
}

/// Per draw: `log p(y|s_k)` for every class `[B, K]` and the log-ratio
/// `log p − log p°` `[B]` (zero for the training reference).
fn class_draws(
    model: &CsgModel,
    x: &Tensor,
    noise: &Noise,
    reference: Reference,
) -> Result<Vec<(Tensor, Vec<f64>)>> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let xv = tape.constant(x.clone());
    let b = check_batch(xv, noise)?;
    let q = model.encode(&p, xv)?;
    let prior = model.prior_vars(&p)?;
    let tilde: Option<PriorVars<'_>> = match reference {
        Reference::Learned => Some(model.test_prior_vars(&p)?),
        _ => None,
    };
    let mut out = Vec::with_capacity(noise.n_mc());
    for k in 0..noise.n_mc() {
        let d = draw(&q, noise, k)?;
        let ls = log_softmax(model.logits(&p, d.s)?)?.value().clone();
        let r = match (reference, &tilde) {
            (Reference::Training, _) => vec![0.0; b],
            (Reference::Independent, _) => prior.log_ratio(d.s, d.v)?.value().data().to_vec(),
            (Reference::Learned, Some(t)) => {
                let lp = prior.log_density(d.s, d.v)?;
                lp.sub(t.log_density(d.s, d.v)?)?.value().data().to_vec()
            }
            (Reference::Learned, None) => unreachable!(),
        };
        out.push((ls, r));
    }
    Ok(out)
}

/// `log π(y|x) = logsumexp_k(r_k + log p(y|s_k)) − log K` for every class,
/// `[B, K]`. With the training reference this is `log q(y|x)`.
pub fn log_pi_y_given_x(
    model: &CsgModel,
    x: &Tensor,
    noise: &Noise,
    reference: Reference,
) -> Result<Tensor> {
    let draws = class_draws(model, x, noise, reference)?;
    let (b, k) = (draws[0].0.rows(), draws[0].0.cols());
    let n = draws.len();
    let mut out = Tensor::zeros(&[b, k]);
    let mut buf = vec![0.0; n];
    for i in 0..b {
        for c in 0..k {
            for (j, (ls, r)) in draws.iter().enumerate() {
                buf[j] = r[i] + ls.at(i, c);
            }
            out.set(i, c, logsumexp(&buf) - (n as f64).ln());
        }
    }
    Ok(out)
}

/// Unnormalized class weights `π(y|x)`, `[B, K]`.
pub fn pi_y_given_x(model: &CsgModel, x: &Tensor, noise: &Noise, reference: Reference) -> Result<Tensor> {
    Ok(log_pi_y_given_x(model, x, noise, reference)?.map(f64::exp))
}

/// `q(y|x) = E_q[p(y|s)]`, `[B, K]`.
pub fn q_y_given_x(model: &CsgModel, x: &Tensor, noise: &Noise) -> Result<Tensor> {
    pi_y_given_x(model, x, noise, Reference::Training)
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

impl Prediction {
    fn from_log_probs(lp: Tensor) -> Self {
        let mut probs = lp;
        for i in 0..probs.rows() {
            let norm = logsumexp(probs.row(i));
            for c in 0..probs.cols() {
                let v = probs.at(i, c);
                probs.set(i, c, (v - norm).exp());
            }
        }
        let labels = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
        Prediction { probs, labels }
    }
}

/// Test-domain prediction `E_q[p(y|s)]` by ancestral sampling from the
/// encoder posterior, which is `q`, `q⊥` or `q̃` depending on the variant
/// the model was trained with.
pub fn predict(model: &CsgModel, x: &Tensor, noise: &Noise) -> Result<Prediction> {
    Ok(Prediction::from_log_probs(log_pi_y_given_x(
        model,
        x,
        noise,
        Reference::Training,
    )?))
}

/// Training-domain predictor for model selection of CSG-ind and CSG-DA:
/// `π(y|x)` normalized over classes.
pub fn validation_predict(
    model: &CsgModel,
    variant: VariantKind,
    x: &Tensor,
    noise: &Noise,
) -> Result<Prediction> {
    if !variant.validates_with_pi() {
        return Err(Error::Contract(format!(
            "validation through normalized pi is defined for csg-ind and the adaptation variants, not {variant}"
        )));
    }
    let lp = log_pi_y_given_x(model, x, noise, variant.reference())?;
    Ok(Prediction::from_log_probs(lp))
}

/// Class probabilities of the baseline.
pub fn predict_baseline(mlp: &Mlp, x: &Tensor) -> Result<Prediction> {
    let tape = Tape::new();
    let p = mlp.params.bind(&tape, |_| false);
    let lp = log_softmax(mlp.logits(&p, tape.constant(x.clone()))?)?;
    let t = lp.value().clone();
    Ok(Prediction::from_log_probs(t))
}

#[cfg(test)]
mod tests;
