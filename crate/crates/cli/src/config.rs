//! Experiment configuration: a TOML document whose fields all have defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use csg::data::ShiftedMnistSpec;
use csg::objectives::VariantKind;
use csg::theory::BoundConstants;
use csg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the data root. Raw MNIST is read from its
/// `mnist` subdirectory.
pub const DATA_ROOT_ENV: &str = "CSG_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Data root; falls back to `$CSG_DATA_ROOT`, then `data`.
    pub data_root: Option<PathBuf>,
    /// Generated dataset containers; defaults to `<data_root>/<dataset>`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Training items kept (stratified) before the validation split.
    pub limit: Option<usize>,
    /// Share of each class kept for training; the rest validates.
    pub validation_fraction: f64,
    /// Runs use seeds `train.seed .. train.seed + seeds`.
    pub seeds: usize,
    /// Run seeds on separate threads.
    pub parallel: bool,
    /// Test domain whose unlabeled inputs drive adaptation; defaults to the
    /// first test domain.
    pub target: Option<String>,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub theory: TheoryCheckConfig,
    pub table: TableConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_root: None,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            limit: None,
            validation_fraction: 0.8,
            seeds: 1,
            parallel: false,
            target: None,
            generate: GenerateConfig::default(),
            train: TrainConfig::default(),
            theory: TheoryCheckConfig::default(),
            table: TableConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn mnist_dir(&self) -> PathBuf {
        self.generate.mnist_dir.clone().unwrap_or_else(|| self.data_root().join("mnist"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.data_root().join(self.generate.dataset.name()))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut resolved = self.clone();
        resolved.data_root = Some(self.data_root());
        resolved.data_dir = Some(self.data_dir());
        resolved.generate.mnist_dir = Some(self.mnist_dir());
        resolved.train.learning_rate = Some(self.train.learning_rate());
        std::fs::write(dir.join("config.toml"), toml::to_string(&resolved)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ShiftedMnist,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::ShiftedMnist => "shifted-mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub dataset: DatasetKind,
    pub seed: u64,
    /// Directory with the four raw MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
    pub shifted_mnist: ShiftedMnistSpec,
    pub synthetic: SyntheticConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            dataset: DatasetKind::ShiftedMnist,
            seed: 0,
            mnist_dir: None,
            shifted_mnist: ShiftedMnistSpec::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// A correlated-prior synthetic CSG and its sample sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub d_s: usize,
    pub d_v: usize,
    pub rho: f64,
    pub sigma_mu: f64,
    pub n: usize,
    pub n_test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            d_s: 1,
            d_v: 1,
            rho: 0.8,
            sigma_mu: 0.1,
            n: 1000,
            n_test: 1000,
        }
    }
}

/// Parameters of `theory-check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryCheckConfig {
    pub seed: u64,
    /// Random covariance pairs compared against Monte Carlo.
    pub pairs: usize,
    pub max_dim: usize,
    pub samples: usize,
    /// Agreement threshold in standard errors.
    pub se_tolerance: f64,
    /// Tolerance on the divergence of identical priors.
    pub zero_tolerance: f64,
    /// Added to every closed-form value; nonzero only to exercise failure.
    pub closed_form_offset: f64,
    /// Noise levels of the one-dimensional bound check.
    pub sigma_mus: Vec<f64>,
    pub linear: LinearCheck,
    /// Constants for an explicit bound evaluation.
    pub constants: Option<BoundConstants>,
    /// Fisher divergence paired with `constants`.
    pub fisher: Option<f64>,
    pub identification: Option<IdentificationConfig>,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        TheoryCheckConfig {
            seed: 0,
            pairs: 20,
            max_dim: 5,
            samples: 100_000,
            se_tolerance: 3.0,
            zero_tolerance: 1e-12,
            closed_form_offset: 0.0,
            sigma_mus: vec![0.1, 0.05, 0.02],
            linear: LinearCheck::default(),
            constants: None,
            fisher: None,
            identification: None,
        }
    }
}

/// One-dimensional linear-Gaussian ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearCheck {
    pub gain: f64,
    pub slope: f64,
    pub var: f64,
    pub var_test: f64,
}

impl Default for LinearCheck {
    fn default() -> Self {
        LinearCheck {
            gain: 1.0,
            slope: 2.0,
            var: 1.0,
            var_test: 2.0,
        }
    }
}

/// Trains a CSG on a fixed synthetic ground truth at several noise levels and
/// checks that the mixing score does not increase as the noise shrinks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    pub ground_truth_seed: u64,
    pub rho: f64,
    /// Decreasing noise levels.
    pub sigma_mus: Vec<f64>,
    pub seeds: usize,
    /// Seeds that must show a non-increasing score.
    pub min_agreeing: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub hidden: usize,
    /// Set the model's likelihood scale to each data noise level instead
    /// of `train.sigma_x`.
    pub match_noise: bool,
    pub train: TrainConfig,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            ground_truth_seed: 0,
            rho: 0.8,
            sigma_mus: vec![0.3, 0.1, 0.03],
            seeds: 5,
            min_agreeing: 4,
            n_train: 10_000,
            n_eval: 2000,
            hidden: 16,
            match_noise: false,
            train: TrainConfig {
                epochs: 100,
                batch_size: 100,
                elbo_weight: 1e-3,
                sigma_x: 0.1,
                eval_mc: 8,
                restore_best: false,
                ..TrainConfig::default()
            },
        }
    }
}

/// Variants and target domains of `repro-table1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableConfig {
    pub variants: Vec<VariantKind>,
    /// Test domains adapted to; defaults to all of them.
    pub adaptation_targets: Option<Vec<String>>,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            variants: vec![
                VariantKind::Ce,
                VariantKind::Csgz,
                VariantKind::Csg,
                VariantKind::CsgInd,
                VariantKind::CsgzDa,
                VariantKind::CsgDa,
            ],
            adaptation_targets: None,
        }
    }
}
