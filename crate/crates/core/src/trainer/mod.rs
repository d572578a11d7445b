//! Training loop, evaluation and model selection.
//!
//! Every run is a deterministic function of its configuration and the
//! dataset contents: parameter initialization, minibatch order, Monte-Carlo
//! noise and evaluation noise all come from fixed streams of the run seed.

mod optim;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, Arch, CsgModel, Mlp, MlpArch, Params};
use crate::objectives::{
    ce_objective, predict, predict_baseline, validation_predict, variant_objective, Noise, ObjectiveConfig,
    VariantKind,
};
use crate::par;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Rows per evaluation batch.
pub const EVAL_BATCH: usize = 512;

/// Validation accuracies within this margin of the best count as equal in
/// [`select_model`].
pub const SELECTION_MARGIN: f64 = 0.005;

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: VariantKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Defaults to 1e-3, or 3e-4 for the adaptation variants.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub sigma_x: f64,
    pub elbo_weight: f64,
    pub adaptation_weight: f64,
    pub n_mc: usize,
    /// Posterior draws per prediction.
    pub eval_mc: usize,
    pub use_posterior_mean: bool,
    pub train_decoder_on_target: bool,
    /// Normalize `π(y|x)` over classes in the supervision term.
    pub normalize_pi: bool,
    pub seed: u64,
    /// Adaptation variants first train the matching non-adaptive objective
    /// for this many epochs (defaults to `epochs`).
    pub warm_start_epochs: Option<usize>,
    pub warm_start_learning_rate: f64,
    pub cold_start: bool,
    /// Keep the best-validation epoch; otherwise the last epoch is kept.
    pub restore_best: bool,
    pub rmsprop_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: VariantKind::Csg,
            batch_size: 128,
            epochs: 100,
            optimizer: OptimizerKind::Rmsprop,
            learning_rate: None,
            weight_decay: 1e-5,
            sigma_x: 0.03,
            elbo_weight: 1e-4,
            adaptation_weight: 1e-4,
            n_mc: 1,
            eval_mc: 32,
            use_posterior_mean: false,
            train_decoder_on_target: false,
            normalize_pi: true,
            seed: 0,
            warm_start_epochs: None,
            warm_start_learning_rate: 1e-3,
            cold_start: false,
            restore_best: true,
            rmsprop_alpha: 0.99,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or(if self.variant.is_adaptation() { 3e-4 } else { 1e-3 })
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            elbo_weight: self.elbo_weight,
            adaptation_weight: self.adaptation_weight,
            n_mc: self.n_mc,
            use_posterior_mean: self.use_posterior_mean,
            train_decoder_on_target: self.train_decoder_on_target,
            normalize_pi: self.normalize_pi,
        }
    }

    pub fn optimizer_config(&self, learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate,
            weight_decay: self.weight_decay,
            alpha: self.rmsprop_alpha,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("train config: {m}")));
        if self.batch_size == 0 || self.eval_mc == 0 {
            return bad("batch_size and eval_mc must be at least 1".into());
        }
        let lr = self.learning_rate();
        if !(lr > 0.0) || !(self.warm_start_learning_rate > 0.0) {
            return bad(format!("learning rate {lr}"));
        }
        if !(self.weight_decay >= 0.0) || !(self.sigma_x > 0.0) {
            return bad("weight_decay must be >= 0 and sigma_x > 0".into());
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.eps > 0.0)
        {
            return bad("optimizer constants out of range".into());
        }
        self.objective().validate()
    }
}

/// Network widths for the generative variants and the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architectures {
    pub csg: Arch,
    pub baseline: MlpArch,
}

impl Architectures {
    pub fn mnist(classes: usize) -> Self {
        Architectures {
            csg: Arch::mnist(classes),
            baseline: MlpArch::mnist(classes),
        }
    }

    pub fn synthetic(x_dim: usize, d_s: usize, d_v: usize, hidden: usize) -> Self {
        Architectures {
            csg: Arch::synthetic(x_dim, d_s, d_v, hidden),
            baseline: MlpArch {
                x_dim,
                hidden: vec![hidden, hidden],
                classes: 2,
            },
        }
    }

    /// The CSG architecture for `variant`; the CSGz variants drop `v`.
    pub fn csg_for(&self, variant: VariantKind) -> Arch {
        if variant.has_v() {
            self.csg.clone()
        } else {
            Arch {
                d_v: 0,
                ..self.csg.clone()
            }
        }
    }
}

/// A trained predictor.
#[derive(Clone, Debug)]
pub enum Trained {
    Csg(CsgModel),
    Baseline(Mlp),
}

impl Trained {
    pub fn params(&self) -> &Params {
        match self {
            Trained::Csg(m) => &m.params,
            Trained::Baseline(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Trained::Csg(m) => &mut m.params,
            Trained::Baseline(m) => &mut m.params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Trained::Csg(m) => m.save(path),
            Trained::Baseline(m) => m.save(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, _) = read_checkpoint(path)?;
        match header.kind.as_str() {
            "csg" => Ok(Trained::Csg(CsgModel::load(path)?)),
            "baseline" => Ok(Trained::Baseline(Mlp::load(path)?)),
            k => Err(Error::Format(format!("unknown checkpoint kind `{k}`"))),
        }
    }
}

/// Which predictor an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Test-domain prediction `E_q[p(y|s)]`.
    Test,
    /// Training-domain validation; normalized `π(y|x)` where defined.
    Validation(VariantKind),
}

/// Predicted labels for every row of `set`, batched in parallel. Batch `b`
/// draws its noise from stream `b` of `seed`.
pub fn predict_labels(model: &Trained, set: &Dataset, mode: EvalMode, seed: u64, n_mc: usize) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::Empty(format!("cannot evaluate on empty set `{}`", set.domain)));
    }
    let batches = set.len().div_ceil(EVAL_BATCH);
    let cfg = ObjectiveConfig {
        n_mc,
        ..ObjectiveConfig::default()
    };
    let parts = par::map_indexed(batches, |b| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (b * EVAL_BATCH..((b + 1) * EVAL_BATCH).min(set.len())).collect();
        let (x, _) = set.batch(&idx);
        let pred = match model {
            Trained::Baseline(m) => predict_baseline(m, &x)?,
            Trained::Csg(m) => {
                let noise = Noise::for_model(&mut rng::stream(seed, b as u64), &cfg, m, idx.len());
                match mode {
                    EvalMode::Validation(v) if v.validates_with_pi() => validation_predict(m, v, &x, &noise)?,
                    _ => predict(m, &x, &noise)?,
                }
            }
        };
        Ok(pred.labels)
    });
    let mut out = Vec::with_capacity(set.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of matching labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::CountMismatch {
            what: "predictions vs labels",
            left: predicted.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy of zero items".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `counts[true][predicted]`.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// Test-domain accuracy of `model` on `set`.
pub fn evaluate(model: &Trained, set: &Dataset, seed: u64, n_mc: usize) -> Result<f64> {
    accuracy(&predict_labels(model, set, EvalMode::Test, seed, n_mc)?, &set.labels)
}

/// Training-domain validation accuracy for model selection.
pub fn validation_accuracy(model: &Trained, set: &Dataset, variant: VariantKind, seed: u64, n_mc: usize) -> Result<f64> {
    accuracy(&predict_labels(model, set, EvalMode::Validation(variant), seed, n_mc)?, &set.labels)
}

/// Datasets for one run. Adaptation variants need `target`, an unlabeled
/// stream from the test domain (its labels are never read).
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub tests: &'a [Dataset],
    pub target: Option<&'a Dataset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    WarmStart,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_objective: f64,
    pub learning_rate: f64,
    pub validation_accuracy: Option<f64>,
    pub test_accuracies: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub test_domains: Vec<String>,
    /// Test accuracies of the selected (best-validation) parameters.
    pub test_accuracies: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_seconds: f64,
}

/// The timing-free part of a [`RunRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: VariantKind,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub test_domains: Vec<String>,
    pub test_accuracies: Vec<f64>,
    pub train_objectives: Vec<f64>,
    pub validation_accuracies: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn summary(&self) -> RunSummary {
        let main = self.epochs.iter().filter(|e| e.phase == Phase::Main);
        RunSummary {
            variant: self.config.variant,
            seed: self.seed,
            best_epoch: self.best_epoch,
            best_validation_accuracy: self.best_validation_accuracy,
            test_domains: self.test_domains.clone(),
            test_accuracies: self.test_accuracies.clone(),
            train_objectives: self.epochs.iter().map(|e| e.train_objective).collect(),
            validation_accuracies: main.filter_map(|e| e.validation_accuracy).collect(),
            checkpoint: self.checkpoint.clone(),
        }
    }

    /// One JSON line per epoch followed by the summary line.
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.epochs {
            let mut v = serde_json::to_value(e)?;
            v["kind"] = "epoch".into();
            writeln!(f, "{}", serde_json::to_string(&v)?)?;
        }
        let mut v = serde_json::to_value(self.summary())?;
        v["kind"] = "summary".into();
        v["wall_clock_seconds"] = self.wall_clock_seconds.into();
        writeln!(f, "{}", serde_json::to_string(&v)?)?;
        f.flush()?;
        Ok(())
    }
}

/// The candidate with the largest ELBO weight among those whose validation
/// accuracy is within [`SELECTION_MARGIN`] of the best; ties go to the lower
/// seed.
pub fn select_model(candidates: &[RunRecord]) -> Result<&RunRecord> {
    let best = candidates
        .iter()
        .map(|r| r.best_validation_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .filter(|r| r.best_validation_accuracy >= best - SELECTION_MARGIN)
        .min_by(|a, b| {
            b.config
                .elbo_weight
                .total_cmp(&a.config.elbo_weight)
                .then(a.seed.cmp(&b.seed))
        })
        .ok_or_else(|| Error::Empty("no candidate runs".into()))
}

/// Objective value and loss gradients (negated objective gradients) of one
/// step.
fn step(
    model: &Trained,
    variant: VariantKind,
    x: Tensor,
    y: &[usize],
    target: Option<Tensor>,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let (obj, p) = match model {
        Trained::Baseline(m) => {
            let p = m.params.bind(&tape, |_| true);
            (ce_objective(m, &p, tape.constant(x), y)?, p)
        }
        Trained::Csg(m) => {
            let p = m.params.bind(&tape, |_| true);
            let noise = Noise::for_model(rng, cfg, m, y.len());
            let adaptation = target.map(|xt| {
                let n = xt.rows();
                (tape.constant(xt), Noise::for_model(rng, cfg, m, n))
            });
            let a = adaptation.as_ref().map(|(v, n)| (*v, n));
            (variant_objective(variant, m, &p, tape.constant(x), y, a, &noise, cfg)?, p)
        }
    };
    tape.backward(obj)?;
    let value = obj.item();
    let grads: Vec<Tensor> = p.grads().into_iter().map(|g| g.scale(-1.0)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteCoordinate {
            coordinate: i,
            context: format!("gradient of `{}`", model.params().entries()[i].name),
        });
    }
    Ok((value, grads))
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    rng: Rng,
    target_order: Vec<usize>,
    target_pos: usize,
    halved: bool,
}

impl Runner<'_> {
    fn target_batch(&mut self, n: usize) -> Option<Tensor> {
        let t = self.data.target?;
        let mut idx = Vec::with_capacity(n);
        while idx.len() < n {
            if self.target_pos == self.target_order.len() {
                self.target_order = (0..t.len()).collect();
                self.target_order.shuffle(&mut self.rng);
                self.target_pos = 0;
            }
            idx.push(self.target_order[self.target_pos]);
            self.target_pos += 1;
        }
        Some(t.batch(&idx).0)
    }

    fn epoch(&mut self, model: &mut Trained, opt: &mut Optimizer, variant: VariantKind, epoch: usize) -> Result<f64> {
        let cfg = self.cfg.objective();
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (k, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (x, y) = self.data.train.batch(chunk);
            let xt = if variant.is_adaptation() { self.target_batch(chunk.len()) } else { None };
            let (value, grads) = step(model, variant, x, &y, xt, &cfg, &mut self.rng).map_err(|e| Error::Diverged {
                epoch,
                step: k,
                source: Box::new(e),
            })?;
            opt.step(model.params_mut(), &grads);
            total += value * chunk.len() as f64;
        }
        let mean = total / self.data.train.len() as f64;
        if !model.params().is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: order.len().div_ceil(self.cfg.batch_size),
                source: Box::new(Error::NonFiniteObjective {
                    term: "parameters",
                    value: f64::NAN,
                }),
            });
        }
        Ok(mean)
    }

    /// One epoch with the divergence policy: on the first failure in the
    /// run, restore the epoch's starting state, halve the learning rate and
    /// retry; a second failure aborts.
    fn guarded_epoch(
        &mut self,
        model: &mut Trained,
        opt: &mut Optimizer,
        variant: VariantKind,
        epoch: usize,
    ) -> Result<f64> {
        let saved = (model.clone(), opt.clone(), self.rng.clone(), self.target_order.clone(), self.target_pos);
        match self.epoch(model, opt, variant, epoch) {
            Err(Error::Diverged { .. }) if !self.halved => {
                self.halved = true;
                (*model, *opt, self.rng, self.target_order, self.target_pos) = saved;
                opt.config.learning_rate *= 0.5;
                self.epoch(model, opt, variant, epoch)
            }
            r => r,
        }
    }
}

fn test_accuracies(model: &Trained, tests: &[Dataset], seed: u64, n_mc: usize) -> Result<Vec<f64>> {
    tests
        .iter()
        .enumerate()
        .map(|(i, t)| evaluate(model, t, rng_seed(seed, 100 + i as u64), n_mc))
        .collect()
}

fn rng_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (STREAM_EVAL + k)
}

/// Trains `config.variant` and returns the record together with the
/// best-validation parameters, or the last epoch's without `restore_best`
/// (also written to `checkpoint` when given).
pub fn train(
    config: &TrainConfig,
    archs: &Architectures,
    data: TrainData<'_>,
    checkpoint: Option<&Path>,
) -> Result<(RunRecord, Trained)> {
    config.validate()?;
    let variant = config.variant;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::Empty("training and validation sets must be nonempty".into()));
    }
    if variant.is_adaptation() && data.target.is_none_or(|t| t.is_empty()) {
        return Err(Error::Contract(format!("{variant} needs a nonempty unlabeled target set")));
    }
    let started = Instant::now();
    let mut init = rng::stream(config.seed, STREAM_INIT);
    let mut model = if variant.is_generative() {
        Trained::Csg(CsgModel::new(archs.csg_for(variant), config.sigma_x, &mut init)?)
    } else {
        Trained::Baseline(Mlp::new(archs.baseline.clone(), &mut init)?)
    };
    let mut runner = Runner {
        cfg: config,
        data,
        rng: rng::stream(config.seed, STREAM_TRAIN),
        target_order: Vec::new(),
        target_pos: 0,
        halved: false,
    };
    let mut epochs = Vec::new();

    if variant.is_adaptation() {
        if !config.cold_start {
            let base = if variant.has_v() { VariantKind::Csg } else { VariantKind::Csgz };
            let lr = config.warm_start_learning_rate;
            let mut opt = Optimizer::new(config.optimizer_config(lr), model.params());
            for epoch in 0..config.warm_start_epochs.unwrap_or(config.epochs) {
                let t0 = Instant::now();
                let obj = runner.guarded_epoch(&mut model, &mut opt, base, epoch)?;
                epochs.push(EpochRecord {
                    phase: Phase::WarmStart,
                    epoch,
                    train_objective: obj,
                    learning_rate: opt.config.learning_rate,
                    validation_accuracy: None,
                    test_accuracies: Vec::new(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
            }
        }
        if let Trained::Csg(m) = &mut model {
            m.add_test_prior();
        }
    }

    let val_seed = rng_seed(config.seed, 0);
    let mut opt = Optimizer::new(config.optimizer_config(config.learning_rate()), model.params());
    let mut best: Option<(usize, f64, Params, Vec<f64>)> = None;
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let obj = runner.guarded_epoch(&mut model, &mut opt, variant, epoch)?;
        let val = validation_accuracy(&model, data.validation, variant, val_seed, config.eval_mc)?;
        let tests = test_accuracies(&model, data.tests, config.seed, config.eval_mc)?;
        if !config.restore_best || best.as_ref().is_none_or(|b| val >= b.1) {
            best = Some((epoch, val, model.params().clone(), tests.clone()));
        }
        epochs.push(EpochRecord {
            phase: Phase::Main,
            epoch,
            train_objective: obj,
            learning_rate: opt.config.learning_rate,
            validation_accuracy: Some(val),
            test_accuracies: tests,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, best_val, best_params, best_tests) = match best {
        Some(b) => b,
        None => {
            let val = validation_accuracy(&model, data.validation, variant, val_seed, config.eval_mc)?;
            let tests = test_accuracies(&model, data.tests, config.seed, config.eval_mc)?;
            (0, val, model.params().clone(), tests)
        }
    };
    *model.params_mut() = best_params;
    if let Some(path) = checkpoint {
        model.save(path)?;
    }
    let record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        epochs,
        best_epoch,
        best_validation_accuracy: best_val,
        test_domains: data.tests.iter().map(|t| t.domain.clone()).collect(),
        test_accuracies: best_tests,
        checkpoint: checkpoint.map(Path::to_path_buf),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}
