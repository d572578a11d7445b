//! Datasets: raw MNIST ingestion, the shifted-MNIST domains, synthetic CSG
//! samples with recorded latents, stratified splitting and a flat binary
//! container for generated sets.

mod container;
mod idx;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use container::{digest_hex, read_dataset, write_dataset, DATA_MAGIC, DATA_VERSION};
pub use idx::{load_idx, parse_idx, Idx, IMAGE_MAGIC, LABEL_MAGIC};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::tensor::{cholesky, Tensor};
use crate::theory::{GroundTruthHandles, Mechanism, Readout};

pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;

/// Ground-truth latents recorded alongside synthetic observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub s: Tensor,
    pub v: Tensor,
}

/// Labeled observations from one domain. Images are rows of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain: String,
    pub latents: Option<Latents>,
}

pub type LabeledImageSet = Dataset;

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize, domain: impl Into<String>) -> Result<Self> {
        let d = Dataset {
            x,
            labels,
            classes,
            domain: domain.into(),
            latents: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rank() != 2 || self.x.rows() != self.labels.len() {
            return Err(Error::CountMismatch {
                what: "observations vs labels",
                left: self.x.rows(),
                right: self.labels.len(),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        if let Some(l) = &self.latents {
            if l.s.rows() != self.len() || l.v.rows() != self.len() {
                return Err(Error::CountMismatch {
                    what: "observations vs latents",
                    left: self.len(),
                    right: l.s.rows(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Rows `idx` in the given order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (gather(&self.x, idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (x, labels) = self.batch(idx);
        Dataset {
            x,
            labels,
            classes: self.classes,
            domain: self.domain.clone(),
            latents: self.latents.as_ref().map(|l| Latents {
                s: gather(&l.s, idx),
                v: gather(&l.v, idx),
            }),
        }
    }

    /// At most `limit` items, keeping class proportions (largest remainder).
    pub fn stratified_subset(&self, limit: usize, seed: u64) -> Dataset {
        if limit >= self.len() {
            return self.clone();
        }
        let mut rng = rng::seeded(seed);
        let by_class = indices_by_class(self, &mut rng);
        let n = self.len() as f64;
        let exact: Vec<f64> = by_class.iter().map(|c| limit as f64 * c.len() as f64 / n).collect();
        let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..take.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let short = limit - take.iter().sum::<usize>();
        for &c in order.iter().take(short) {
            take[c] += 1;
        }
        let mut idx: Vec<usize> = by_class
            .iter()
            .zip(&take)
            .flat_map(|(c, &k)| c[..k].iter().copied())
            .collect();
        idx.sort_unstable();
        self.subset(&idx)
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("row gather")
}

fn indices_by_class(set: &Dataset, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); set.classes];
    for (i, &y) in set.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for c in &mut by_class {
        c.shuffle(rng);
    }
    by_class
}

/// Stratified random split: each class contributes `round(fraction · n_c)`
/// items to the first part. Both parts are shuffled.
pub fn split_train_validation(set: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if set.len() < 5 {
        return Err(Error::domain("split_train_validation", format!("{} items, need at least 5", set.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain("split_train_validation", format!("fraction {fraction}")));
    }
    let mut rng = rng::seeded(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in indices_by_class(set, &mut rng) {
        let k = (fraction * c.len() as f64).round() as usize;
        train.extend_from_slice(&c[..k]);
        val.extend_from_slice(&c[k..]);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    Ok((set.subset(&train), set.subset(&val)))
}

/// Raw MNIST from the four standard IDX files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |images: &str, labels: &str, domain: &str| -> Result<Dataset> {
        let x = load_idx(&dir.join(images))?.into_images()?;
        let y = load_idx(&dir.join(labels))?.into_labels()?;
        if x.rows() != y.len() {
            return Err(Error::CountMismatch {
                what: "images vs labels",
                left: x.rows(),
                right: y.len(),
            });
        }
        Dataset::new(x, y, 10, domain)
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "mnist-train")?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "mnist-test")?,
    ))
}

/// Horizontal shift laws for the two retained digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftedMnistSpec {
    /// Retained digits; digit `digits[k]` becomes label `k`.
    pub digits: [usize; 2],
    /// Training shift `N(mean, sd²)` per label.
    pub train_shift: [(f64, f64); 2],
    /// Standard deviation of the zero-mean shift of test domain B.
    pub test_b_sd: f64,
}

impl Default for ShiftedMnistSpec {
    fn default() -> Self {
        ShiftedMnistSpec {
            digits: [0, 1],
            train_shift: [(-5.0, 1.0), (5.0, 1.0)],
            test_b_sd: 2.0,
        }
    }
}

/// Training domain and the two test domains.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedMnist {
    pub train: Dataset,
    pub test_a: Dataset,
    pub test_b: Dataset,
}

/// Translates a square image `shift` columns to the right (left if
/// negative), zero-filling vacated columns and dropping pixels that leave.
pub fn shift_image(img: &[f64], side: usize, shift: i64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let s = side as i64;
    for r in 0..side {
        for c in 0..s {
            let src = c - shift;
            if (0..s).contains(&src) {
                out[r * side + c as usize] = img[r * side + src as usize];
            }
        }
    }
    out
}

fn keep_digits(raw: &Dataset, digits: [usize; 2]) -> Result<Dataset> {
    let idx: Vec<usize> = (0..raw.len()).filter(|&i| digits.contains(&raw.labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::Empty(format!("no digits {digits:?} in {}", raw.domain)));
    }
    let mut set = raw.subset(&idx);
    for y in &mut set.labels {
        *y = if *y == digits[0] { 0 } else { 1 };
    }
    set.classes = 2;
    Ok(set)
}

/// Shifts every image by `round(δ)` with `δ ~ N(mean(y), sd(y)²)` drawn from
/// stream `stream_base + i` of `seed`.
fn shifted(set: &Dataset, law: impl Fn(usize) -> (f64, f64) + Sync, seed: u64, stream_base: u64) -> Vec<i64> {
    par::map_indexed(set.len(), |i| {
        let (mean, sd) = law(set.labels[i]);
        if sd == 0.0 {
            return mean.round() as i64;
        }
        let mut r = rng::stream(seed, stream_base + i as u64);
        (mean + sd * rng::normal(&mut r)).round() as i64
    })
}

fn apply_shifts(set: &Dataset, shifts: &[i64], domain: &str) -> Dataset {
    let rows = par::map_indexed(set.len(), |i| shift_image(set.x.row(i), MNIST_SIDE, shifts[i]));
    Dataset {
        x: Tensor::matrix(set.len(), MNIST_PIXELS, rows.concat()).expect("image rows"),
        labels: set.labels.clone(),
        classes: set.classes,
        domain: domain.to_string(),
        latents: None,
    }
}

/// Realized training shifts, exposed for statistics checks.
pub fn training_shifts(train_raw: &Dataset, spec: &ShiftedMnistSpec, seed: u64) -> Result<Vec<i64>> {
    let set = keep_digits(train_raw, spec.digits)?;
    Ok(shifted(&set, |y| spec.train_shift[y], seed, 0))
}

pub fn make_shifted_mnist(
    train_raw: &Dataset,
    test_raw: &Dataset,
    spec: &ShiftedMnistSpec,
    seed: u64,
) -> Result<ShiftedMnist> {
    if train_raw.dim() != MNIST_PIXELS || test_raw.dim() != MNIST_PIXELS {
        return Err(Error::shape("make_shifted_mnist", train_raw.x.shape(), &[MNIST_PIXELS]));
    }
    let train = keep_digits(train_raw, spec.digits)?;
    let test = keep_digits(test_raw, spec.digits)?;
    let train_shifts = shifted(&train, |y| spec.train_shift[y], seed, 0);
    let b_shifts = shifted(&test, |_| (0.0, spec.test_b_sd), seed, 1 << 40);
    let mut test_a = test.clone();
    test_a.domain = "shifted-mnist-test-a".into();
    Ok(ShiftedMnist {
        train: apply_shifts(&train, &train_shifts, "shifted-mnist-train"),
        test_a,
        test_b: apply_shifts(&test, &b_shifts, "shifted-mnist-test-b"),
    })
}

/// Synthetic CSG: `(s, v) ~ N(0, Σ)`, `x = f(s, v) + σ_μ ε`,
/// `y ~ Bernoulli(σ(wᵀs + b))`. The test domain replaces `Σ` with `Σ̃` and
/// shares the mechanisms by reference.
#[derive(Clone, Debug)]
pub struct SyntheticCsgSpec {
    pub d_s: usize,
    pub d_v: usize,
    pub sigma: Tensor,
    pub sigma_test: Tensor,
    pub mechanism: Arc<Mechanism>,
    pub readout: Arc<Readout>,
    pub sigma_mu: f64,
}

impl SyntheticCsgSpec {
    /// Unit-variance training prior with correlation `rho` between `s_i` and
    /// `v_i`, an independent unit test prior, a random mechanism with
    /// `α = 0.5` and readout weights `2/√d_s`.
    pub fn correlated(d_s: usize, d_v: usize, rho: f64, sigma_mu: f64, seed: u64) -> Result<Self> {
        let d = d_s + d_v;
        let mut sigma = Tensor::eye(d);
        for i in 0..d_s.min(d_v) {
            sigma.set(i, d_s + i, rho);
            sigma.set(d_s + i, i, rho);
        }
        let mut rng = rng::seeded(seed);
        let spec = SyntheticCsgSpec {
            d_s,
            d_v,
            sigma,
            sigma_test: Tensor::eye(d),
            mechanism: Arc::new(Mechanism::random(d, 0.5, &mut rng)),
            readout: Arc::new(Readout {
                w: vec![2.0 / (d_s as f64).sqrt(); d_s],
                b: 0.0,
            }),
            sigma_mu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_s + self.d_v;
        if self.sigma.shape() != [d, d] || self.sigma_test.shape() != [d, d] || self.mechanism.dim() != d {
            return Err(Error::shape("synthetic spec", self.sigma.shape(), &[d, d]));
        }
        if self.readout.w.len() != self.d_s {
            return Err(Error::shape("synthetic spec", &[self.readout.w.len()], &[self.d_s]));
        }
        cholesky(&self.sigma)?;
        cholesky(&self.sigma_test)?;
        Ok(())
    }

    /// The same ground truth with the test prior as its latent law.
    pub fn test_domain(&self) -> Self {
        SyntheticCsgSpec {
            sigma: self.sigma_test.clone(),
            sigma_test: self.sigma.clone(),
            mechanism: Arc::clone(&self.mechanism),
            readout: Arc::clone(&self.readout),
            ..self.clone()
        }
    }

    pub fn with_sigma_mu(&self, sigma_mu: f64) -> Self {
        SyntheticCsgSpec {
            sigma_mu,
            ..self.clone()
        }
    }

    pub fn handles(&self) -> GroundTruthHandles {
        GroundTruthHandles {
            mechanism: Arc::clone(&self.mechanism),
            readout: Arc::clone(&self.readout),
            sigma: self.sigma.clone(),
            sigma_test: self.sigma_test.clone(),
            sigma_mu: self.sigma_mu,
            d_s: self.d_s,
        }
    }
}

/// `n` draws from the synthetic CSG; item `i` uses stream `i` of `seed`.
pub fn synth_csg_sample(spec: &SyntheticCsgSpec, n: usize, seed: u64, domain: &str) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synth_csg_sample: n = 0".into()));
    }
    spec.validate()?;
    let l = cholesky(&spec.sigma)?;
    let d = spec.d_s + spec.d_v;
    let draws = par::map_indexed(n, |i| {
        let mut r = rng::stream(seed, i as u64);
        let e = rng::normal_vec(&mut r, d);
        let z: Vec<f64> = (0..d).map(|a| (0..=a).map(|b| l.at(a, b) * e[b]).sum()).collect();
        let noise = rng::normal_vec(&mut r, d);
        let u: f64 = r.random();
        (z, noise, u)
    });
    let z = Tensor::matrix(n, d, draws.iter().flat_map(|t| t.0.iter().copied()).collect())?;
    let mut x = spec.mechanism.forward(&z)?;
    for (row, t) in x.data_mut().chunks_mut(d).zip(&draws) {
        row.iter_mut().zip(&t.1).for_each(|(a, e)| *a += spec.sigma_mu * e);
    }
    let cols = |lo: usize, hi: usize| {
        Tensor::matrix(n, hi - lo, (0..n).flat_map(|i| z.row(i)[lo..hi].to_vec()).collect()).expect("latent block")
    };
    let s = cols(0, spec.d_s);
    let v = cols(spec.d_s, d);
    let p1 = spec.readout.prob(&s);
    let labels = draws.iter().zip(&p1).map(|(t, &p)| usize::from(t.2 < p)).collect();
    let mut set = Dataset::new(x, labels, 2, domain)?;
    set.latents = Some(Latents { s, v });
    Ok(set)
}
