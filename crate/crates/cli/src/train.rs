//! Training and evaluation runs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use csg::data::{split_train_validation, Dataset};
use csg::objectives::VariantKind;
use csg::trainer::{self, Architectures, RunSummary, TrainConfig, TrainData, Trained};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::generate::{load_datasets, LoadedData};

pub const SUMMARY: &str = "summary.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";

/// Timing-free outcome of one run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: VariantKind,
    pub seed: u64,
    pub target: Option<String>,
    pub train_items: usize,
    pub validation_items: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    /// Test domain names and accuracies of the selected parameters.
    pub test_domains: Vec<String>,
    pub test_accuracies: Vec<f64>,
    pub record: RunSummary,
}

impl RunReport {
    pub fn accuracy_on(&self, domain: &str) -> Option<f64> {
        let i = self.test_domains.iter().position(|d| d == domain)?;
        Some(self.test_accuracies[i])
    }
}

pub fn architectures(data: &LoadedData) -> Result<Architectures> {
    Ok(match data.manifest.dataset {
        DatasetKind::ShiftedMnist => Architectures::mnist(data.train.classes),
        DatasetKind::Synthetic => {
            let s = data.manifest.synthetic()?;
            Architectures::synthetic(data.train.dim(), s.d_s, s.d_v, 16)
        }
    })
}

/// Stratified `limit` subsample, then the stratified validation split, both
/// keyed by the run seed.
pub fn split(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let pool = match cfg.limit {
        Some(n) => train.stratified_subset(n, seed),
        None => train.clone(),
    };
    Ok(split_train_validation(&pool, cfg.validation_fraction, seed)?)
}

/// Output directory of one run.
pub fn run_dir(out: &Path, variant: VariantKind, seed: u64, target: Option<&str>) -> PathBuf {
    let mut name = format!("{}-seed{seed}", variant.name());
    if let Some(t) = target {
        name.push('-');
        name.push_str(t);
    }
    out.join(name)
}

/// Trains one variant with one seed and writes metrics, summary and
/// checkpoint into `dir`.
pub fn train_one(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    variant: VariantKind,
    seed: u64,
    target: Option<&str>,
    dir: &Path,
) -> Result<RunReport> {
    std::fs::create_dir_all(dir)?;
    let (train_set, validation) = split(cfg, &data.train, seed)?;
    let tests: Vec<Dataset> = data.tests.iter().map(|(_, d)| d.clone()).collect();
    let target_set = if variant.is_adaptation() {
        let name = target.or(cfg.target.as_deref()).unwrap_or(&data.tests[0].0);
        Some((name.to_string(), &data.tests[data.test_index(name)?].1))
    } else {
        None
    };
    let tc = TrainConfig {
        variant,
        seed,
        ..cfg.train.clone()
    };
    let archs = architectures(data)?;
    let ckpt = dir.join(CHECKPOINT);
    let (record, model) = trainer::train(
        &tc,
        &archs,
        TrainData {
            train: &train_set,
            validation: &validation,
            tests: &tests,
            target: target_set.as_ref().map(|t| t.1),
        },
        Some(&ckpt),
    )
    .with_context(|| format!("training {variant} with seed {seed}"))?;
    record.write_metrics(&dir.join(METRICS))?;
    let mut summary = record.summary();
    summary.checkpoint = Some(PathBuf::from(CHECKPOINT));
    let report = RunReport {
        variant,
        seed,
        target: target_set.map(|t| t.0),
        train_items: train_set.len(),
        validation_items: validation.len(),
        train_accuracy: train_accuracy(&model, &train_set, &tc)?,
        validation_accuracy: record.best_validation_accuracy,
        test_domains: data.tests.iter().map(|(n, _)| n.clone()).collect(),
        test_accuracies: record.test_accuracies.clone(),
        record: summary,
    };
    std::fs::write(dir.join(SUMMARY), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

fn train_accuracy(model: &Trained, set: &Dataset, tc: &TrainConfig) -> Result<f64> {
    Ok(trainer::validation_accuracy(model, set, tc.variant, tc.seed, tc.eval_mc)?)
}

/// Runs `jobs` sequentially, or on scoped threads when `parallel`.
pub fn run_jobs<T: Send>(parallel: bool, jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>) -> Result<Vec<T>> {
    if !parallel {
        return jobs.into_iter().map(|j| j()).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.into_iter().map(|j| scope.spawn(j)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("run thread panicked"))))
            .collect()
    })
}

pub fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|k| cfg.train.seed + k).collect()
}

/// Trains `cfg.train.variant` for every configured seed.
pub fn cmd_train_eval(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let data = load_datasets(&cfg.data_dir())?;
    cfg.echo(&cfg.out_dir)?;
    let variant = cfg.train.variant;
    let jobs = seeds(cfg)
        .into_iter()
        .map(|seed| {
            let data = &data;
            Box::new(move || {
                let dir = run_dir(&cfg.out_dir, variant, seed, None);
                train_one(cfg, data, variant, seed, None, &dir)
            }) as Box<dyn FnOnce() -> Result<RunReport> + Send + '_>
        })
        .collect();
    run_jobs(cfg.parallel, jobs)
}

pub fn format_report(r: &RunReport) -> String {
    let mut line = format!(
        "{:<8} seed {:<3} train {:.4}  val {:.4}",
        r.variant.name(),
        r.seed,
        r.train_accuracy,
        r.validation_accuracy
    );
    for (d, a) in r.test_domains.iter().zip(&r.test_accuracies) {
        line.push_str(&format!("  {d} {a:.4}"));
    }
    if let Some(t) = &r.target {
        line.push_str(&format!("  (adapted to {t})"));
    }
    line
}
