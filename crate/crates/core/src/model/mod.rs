//! Neural components of a CSG and the cross-entropy baseline.
//!
//! All weights live in a flat [`Params`] store. A forward pass binds the
//! store to a tape ([`Params::bind`]) and the networks address their
//! weights through [`ParamId`]s, so the same store can be bound trainable,
//! partly frozen, or from externally supplied variables for gradient checks.
//!
//! Encoder (inference model `q(s,v|x)`), for the MNIST architecture:
//!
//! ```text
//! x(784) -> 400 -> 200 ─┬─ first 100 units ──────────── v-mean ── FC+softplus ── v-scale
//!                       └─ all 200 units ── FC ── 50 ── s-mean ── FC+softplus ── s-scale
//! ```
//!
//! `v` is read off the shared layer, and `s` is computed from the whole
//! layer, so `v` can influence `s` but never the reverse.
//!
//! Decoder `f(s, v)`: `s -> 100`, concatenated with `v`, `-> 400 -> 784`
//! with a linear output. Classifier `g(s)`: one linear layer to `K` logits.

mod checkpoint;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{log_softmax, AdditiveGaussianLikelihood, BlockCholeskyPrior, PriorVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, MAGIC, VERSION};

/// Lower bound added to every softplus scale output.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Decoder,
    Classifier,
    Prior,
    TestPrior,
    Baseline,
}

impl Group {
    /// Prior Cholesky parameters are never weight-decayed.
    pub fn decays(self) -> bool {
        !matches!(self, Group::Prior | Group::TestPrior)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Named parameter arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<Param>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    /// Records every array on `tape`, as a differentiable leaf when
    /// `trainable(group)` holds and as a constant otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(Group) -> bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if trainable(p.group) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// `p` with every array of `group` replaced by a constant copy.
    pub fn detach_group<'t>(&self, p: &Bound<'t>, group: Group) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .zip(&p.vars)
            .map(|(e, v)| {
                if e.group == group {
                    let value = v.value().clone();
                    v.tape().constant(value)
                } else {
                    *v
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies `other`'s values in by name, checking shapes.
    pub fn load_from(&mut self, other: &Params) -> Result<()> {
        for p in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load_params", src.value.shape(), p.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// A [`Params`] store recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps variables supplied in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients after `backward`; zeros for constants and unreached leaves.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| {
                v.tape()
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => x,
        }
    }
}

/// Fully-connected layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn new(
        params: &mut Params,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).unwrap();
        let b = Tensor::vector(draw(fan_out));
        Linear {
            w: params.add(format!("{name}.w"), group, w),
            b: params.add(format!("{name}.b"), group, b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

/// Layer widths of a CSG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub x_dim: usize,
    pub enc_hidden: Vec<usize>,
    /// Width of the layer `v` is read from; its first `d_v` units are `v`.
    pub enc_shared: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub dec_s_units: usize,
    pub dec_hidden: Vec<usize>,
    pub classes: usize,
    /// Activation of every hidden layer.
    #[serde(default = "sigmoid")]
    pub hidden: Activation,
    /// Activation producing the latent means.
    pub latent: Activation,
}

fn sigmoid() -> Activation {
    Activation::Sigmoid
}

impl Arch {
    /// The shifted-MNIST architecture with `K` classes.
    pub fn mnist(classes: usize) -> Self {
        Arch {
            x_dim: 784,
            enc_hidden: vec![400],
            enc_shared: 200,
            d_s: 50,
            d_v: 100,
            dec_s_units: 100,
            dec_hidden: vec![400],
            classes,
            hidden: Activation::Sigmoid,
            latent: Activation::Sigmoid,
        }
    }

    /// The same widths with no `v` block: the latent is `z = s`.
    pub fn mnist_z(classes: usize) -> Self {
        Arch {
            d_v: 0,
            ..Self::mnist(classes)
        }
    }

    /// Small networks for low-dimensional synthetic data.
    pub fn synthetic(x_dim: usize, d_s: usize, d_v: usize, hidden: usize) -> Self {
        Arch {
            x_dim,
            enc_hidden: vec![hidden],
            enc_shared: hidden.max(d_v + 1),
            d_s,
            d_v,
            dec_s_units: hidden,
            dec_hidden: vec![hidden],
            classes: 2,
            hidden: Activation::Sigmoid,
            latent: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("architecture: {m}")));
        if self.x_dim == 0 || self.d_s == 0 || self.classes < 2 {
            return bad("x_dim, d_s must be positive and classes >= 2");
        }
        if self.d_v > self.enc_shared {
            return bad("d_v exceeds the shared encoder layer");
        }
        if self.enc_hidden.iter().chain(&self.dec_hidden).any(|&w| w == 0) || self.dec_s_units == 0 {
            return bad("zero-width layer");
        }
        Ok(())
    }
}

/// Per-datum diagonal posterior over `(s, v)`, one row per datum.
#[derive(Clone, Copy, Debug)]
pub struct Posterior<'t> {
    pub s_mean: Var<'t>,
    pub s_scale: Var<'t>,
    pub v_mean: Option<Var<'t>>,
    pub v_scale: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub hidden: Vec<Linear>,
    pub shared: Linear,
    pub s_out: Linear,
    pub s_scale: Linear,
    pub v_scale: Option<Linear>,
}

impl EncoderNet {
    fn new(arch: &Arch, params: &mut Params, rng: &mut Rng) -> Self {
        let g = Group::Encoder;
        let mut width = arch.x_dim;
        let mut hidden = Vec::new();
        for (i, &h) in arch.enc_hidden.iter().enumerate() {
            hidden.push(Linear::new(params, &format!("enc.h{i}"), g, width, h, rng));
            width = h;
        }
        let shared = Linear::new(params, "enc.shared", g, width, arch.enc_shared, rng);
        let s_out = Linear::new(params, "enc.s", g, arch.enc_shared, arch.d_s, rng);
        let s_scale = Linear::new(params, "enc.s_scale", g, arch.d_s, arch.d_s, rng);
        let v_scale =
            (arch.d_v > 0).then(|| Linear::new(params, "enc.v_scale", g, arch.d_v, arch.d_v, rng));
        EncoderNet {
            hidden,
            shared,
            s_out,
            s_scale,
            v_scale,
        }
    }

    pub fn forward<'t>(&self, arch: &Arch, p: &Bound<'t>, x: Var<'t>) -> Result<Posterior<'t>> {
        let sh = x.shape();
        if sh.len() != 2 || sh[1] != arch.x_dim {
            return Err(Error::shape("encode", &sh, &[arch.x_dim]));
        }
        let mut h = x;
        for l in &self.hidden {
            h = arch.hidden.apply(l.forward(p, h)?);
        }
        let pre = self.shared.forward(p, h)?;
        let h = arch.hidden.apply(pre);
        let s_mean = arch.latent.apply(self.s_out.forward(p, h)?);
        let s_scale = self.s_scale.forward(p, s_mean)?.softplus().add_scalar(MIN_SCALE);
        let (v_mean, v_scale) = match &self.v_scale {
            Some(vs) => {
                let v = if arch.latent == arch.hidden {
                    h.slice_cols(0, arch.d_v)?
                } else {
                    arch.latent.apply(pre.slice_cols(0, arch.d_v)?)
                };
                let scale = vs.forward(p, v)?.softplus().add_scalar(MIN_SCALE);
                (Some(v), Some(scale))
            }
            None => (None, None),
        };
        Ok(Posterior {
            s_mean,
            s_scale,
            v_mean,
            v_scale,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub s_in: Linear,
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl DecoderNet {
    fn new(arch: &Arch, params: &mut Params, rng: &mut Rng) -> Self {
        let g = Group::Decoder;
        let s_in = Linear::new(params, "dec.s", g, arch.d_s, arch.dec_s_units, rng);
        let mut width = arch.dec_s_units + arch.d_v;
        let mut hidden = Vec::new();
        for (i, &h) in arch.dec_hidden.iter().enumerate() {
            hidden.push(Linear::new(params, &format!("dec.h{i}"), g, width, h, rng));
            width = h;
        }
        let out = Linear::new(params, "dec.out", g, width, arch.x_dim, rng);
        DecoderNet { s_in, hidden, out }
    }

    pub fn forward<'t>(
        &self,
        arch: &Arch,
        p: &Bound<'t>,
        s: Var<'t>,
        v: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let ss = s.shape();
        if ss.len() != 2 || ss[1] != arch.d_s {
            return Err(Error::shape("decode", &ss, &[arch.d_s]));
        }
        let a = arch.hidden.apply(self.s_in.forward(p, s)?);
        let mut h = match (v, arch.d_v) {
            (_, 0) => a,
            (Some(v), d) => {
                let vs = v.shape();
                if vs.len() != 2 || vs[1] != d || vs[0] != ss[0] {
                    return Err(Error::shape("decode", &vs, &[ss[0], d]));
                }
                a.concat_cols(v)?
            }
            (None, d) => return Err(Error::shape("decode", &[0], &[d])),
        };
        for l in &self.hidden {
            h = arch.hidden.apply(l.forward(p, h)?);
        }
        self.out.forward(p, h)
    }
}

/// Per-row `log p(y|s)` for integer labels.
pub fn class_log_probs<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != labels.len() {
        return Err(Error::shape("class_log_probs", &sh, &[labels.len()]));
    }
    let k = sh[1];
    let mut mask = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        mask.set(i, y, 1.0);
    }
    let mask = logits.tape().constant(mask);
    log_softmax(logits)?.mul(mask)?.sum_axis(1)
}

/// The CSG tuple `⟨p(s,v), p(x|s,v), p(y|s)⟩` with its inference network
/// and, for adaptation, a test-domain prior `p̃(s,v)`.
#[derive(Clone, Debug)]
pub struct CsgModel {
    pub arch: Arch,
    pub likelihood: AdditiveGaussianLikelihood,
    pub params: Params,
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub head: Linear,
    prior: [ParamId; 5],
    test_prior: Option<[ParamId; 5]>,
}

fn add_prior(params: &mut Params, name: &str, group: Group, prior: &BlockCholeskyPrior) -> [ParamId; 5] {
    let names = ["ss_off", "ss_logdiag", "vs", "vv_off", "vv_logdiag"];
    let parts = prior.parts();
    std::array::from_fn(|i| params.add(format!("{name}.{}", names[i]), group, parts[i].clone()))
}

impl CsgModel {
    pub fn new(arch: Arch, sigma_x: f64, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let likelihood = AdditiveGaussianLikelihood::new(sigma_x)?;
        let mut params = Params::new();
        let encoder = EncoderNet::new(&arch, &mut params, rng);
        let decoder = DecoderNet::new(&arch, &mut params, rng);
        let head = Linear::new(&mut params, "head", Group::Classifier, arch.d_s, arch.classes, rng);
        let prior = add_prior(
            &mut params,
            "prior",
            Group::Prior,
            &BlockCholeskyPrior::standard(arch.d_s, arch.d_v),
        );
        Ok(CsgModel {
            arch,
            likelihood,
            params,
            encoder,
            decoder,
            head,
            prior,
            test_prior: None,
        })
    }

    /// Adds `p̃` as a copy of the current training prior (no-op if present).
    pub fn add_test_prior(&mut self) {
        if self.test_prior.is_none() {
            let p = self.prior();
            self.test_prior = Some(add_prior(&mut self.params, "test_prior", Group::TestPrior, &p));
        }
    }

    pub fn has_test_prior(&self) -> bool {
        self.test_prior.is_some()
    }

    fn read_prior(&self, ids: [ParamId; 5]) -> BlockCholeskyPrior {
        let t = |i: usize| self.params.get(ids[i]).clone();
        BlockCholeskyPrior {
            ss_off: t(0),
            ss_logdiag: t(1),
            vs: t(2),
            vv_off: t(3),
            vv_logdiag: t(4),
        }
    }

    fn write_prior(&mut self, ids: [ParamId; 5], prior: &BlockCholeskyPrior) -> Result<()> {
        if (prior.d_s(), prior.d_v()) != (self.arch.d_s, self.arch.d_v) {
            return Err(Error::shape(
                "set_prior",
                &[prior.d_s(), prior.d_v()],
                &[self.arch.d_s, self.arch.d_v],
            ));
        }
        for (id, t) in ids.iter().zip(prior.parts()) {
            *self.params.get_mut(*id) = t.clone();
        }
        Ok(())
    }

    pub fn prior(&self) -> BlockCholeskyPrior {
        self.read_prior(self.prior)
    }

    pub fn set_prior(&mut self, prior: &BlockCholeskyPrior) -> Result<()> {
        self.write_prior(self.prior, prior)
    }

    pub fn test_prior(&self) -> Option<BlockCholeskyPrior> {
        self.test_prior.map(|ids| self.read_prior(ids))
    }

    pub fn set_test_prior(&mut self, prior: &BlockCholeskyPrior) -> Result<()> {
        let ids = self.test_prior.ok_or_else(|| missing_test_prior())?;
        self.write_prior(ids, prior)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.params.bind(tape, |_| true)
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Posterior<'t>> {
        self.encoder.forward(&self.arch, p, x)
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, s: Var<'t>, v: Option<Var<'t>>) -> Result<Var<'t>> {
        self.decoder.forward(&self.arch, p, s, v)
    }

    pub fn logits<'t>(&self, p: &Bound<'t>, s: Var<'t>) -> Result<Var<'t>> {
        let sh = s.shape();
        if sh.len() != 2 || sh[1] != self.arch.d_s {
            return Err(Error::shape("classify", &sh, &[self.arch.d_s]));
        }
        self.head.forward(p, s)
    }

    pub fn prior_vars<'t>(&self, p: &Bound<'t>) -> Result<PriorVars<'t>> {
        let v = self.prior.map(|id| p.get(id));
        PriorVars::bind(v[0].tape(), v)
    }

    pub fn test_prior_vars<'t>(&self, p: &Bound<'t>) -> Result<PriorVars<'t>> {
        let ids = self.test_prior.ok_or_else(|| missing_test_prior())?;
        let v = ids.map(|id| p.get(id));
        PriorVars::bind(v[0].tape(), v)
    }

    /// Posterior means and scales as plain arrays, `[s | v]` per row.
    pub fn encode_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, |_| false);
        let q = self.encode(&p, tape.constant(x.clone()))?;
        let join = |a: Var<'_>, b: Option<Var<'_>>| -> Result<Tensor> {
            let out = match b {
                Some(b) => a.concat_cols(b)?,
                None => a,
            };
            let t = out.value().clone();
            Ok(t)
        };
        Ok((join(q.s_mean, q.v_mean)?, join(q.s_scale, q.v_scale)?))
    }

    /// Decoder means for plain `s` and `v` arrays.
    pub fn decode_values(&self, s: &Tensor, v: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, |_| false);
        let out = self.decode(&p, tape.constant(s.clone()), v.map(|v| tape.constant(v.clone())))?;
        let t = out.value().clone();
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader::new(
            "csg",
            serde_json::to_value(&self.arch)?,
            Some(self.likelihood.sigma_x),
            self.has_test_prior(),
            &self.params,
        );
        write_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        header.expect_kind("csg")?;
        let arch: Arch = serde_json::from_value(header.arch.clone())?;
        let sigma_x = header
            .sigma_x
            .ok_or_else(|| Error::Format("checkpoint lacks sigma_x".into()))?;
        let mut rng = crate::rng::seeded(0);
        let mut model = CsgModel::new(arch, sigma_x, &mut rng)?;
        if header.test_prior {
            model.add_test_prior();
        }
        if model.params.len() != params.len() {
            return Err(Error::CountMismatch {
                what: "checkpoint parameters",
                left: params.len(),
                right: model.params.len(),
            });
        }
        model.params.load_from(&params)?;
        Ok(model)
    }
}

fn missing_test_prior() -> Error {
    Error::Contract("model has no test-domain prior".into())
}

/// Widths of the cross-entropy baseline MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub x_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl MlpArch {
    /// 784-600-300-75-K.
    pub fn mnist(classes: usize) -> Self {
        MlpArch {
            x_dim: 784,
            hidden: vec![600, 300, 75],
            classes,
        }
    }
}

/// Sigmoid MLP classifier trained with cross-entropy.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub arch: MlpArch,
    pub params: Params,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(arch: MlpArch, rng: &mut Rng) -> Result<Self> {
        if arch.x_dim == 0 || arch.classes < 2 || arch.hidden.contains(&0) {
            return Err(Error::Contract("baseline architecture has a zero width".into()));
        }
        let mut params = Params::new();
        let mut layers = Vec::new();
        let mut width = arch.x_dim;
        for (i, &h) in arch.hidden.iter().chain(std::iter::once(&arch.classes)).enumerate() {
            layers.push(Linear::new(&mut params, &format!("mlp.l{i}"), Group::Baseline, width, h, rng));
            width = h;
        }
        Ok(Mlp {
            arch,
            params,
            layers,
        })
    }

    pub fn logits<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let sh = x.shape();
        if sh.len() != 2 || sh[1] != self.arch.x_dim {
            return Err(Error::shape("mlp", &sh, &[self.arch.x_dim]));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, h)?;
            if i < last {
                h = h.sigmoid();
            }
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader::new(
            "baseline",
            serde_json::to_value(&self.arch)?,
            None,
            false,
            &self.params,
        );
        write_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        header.expect_kind("baseline")?;
        let arch: MlpArch = serde_json::from_value(header.arch.clone())?;
        let mut model = Mlp::new(arch, &mut crate::rng::seeded(0))?;
        model.params.load_from(&params)?;
        Ok(model)
    }
}
