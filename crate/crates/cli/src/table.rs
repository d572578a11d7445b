//! Reproduction of the shifted-MNIST rows of the accuracy table.

use anyhow::Result;
use csg::objectives::VariantKind;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::generate::load_datasets;
use crate::train::{run_dir, run_jobs, seeds, train_one, RunReport};

/// Published mean and standard deviation (percent) for shifted MNIST; test
/// domain 0 has no shift, domain 1 shifts by `N(0, 2²)`.
pub fn published_reference(variant: VariantKind, domain: usize) -> Option<(f64, f64)> {
    let row = match (variant, domain) {
        (VariantKind::Ce, 0) => (42.9, 3.1),
        (VariantKind::Csgz, 0) => (53.0, 6.7),
        (VariantKind::Csg, 0) => (81.4, 7.4),
        (VariantKind::CsgInd, 0) => (82.6, 4.0),
        (VariantKind::CsgzDa, 0) => (78.0, 27.2),
        (VariantKind::CsgDa, 0) => (97.6, 4.0),
        (VariantKind::Ce, 1) => (47.8, 1.5),
        (VariantKind::Csgz, 1) => (54.8, 5.6),
        (VariantKind::Csg, 1) => (61.7, 3.6),
        (VariantKind::CsgInd, 1) => (62.3, 2.2),
        (VariantKind::CsgzDa, 1) => (68.1, 17.4),
        (VariantKind::CsgDa, 1) => (72.0, 9.2),
        _ => return None,
    };
    Some(row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: VariantKind,
    pub domain: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub published: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub domains: Vec<String>,
    pub variants: Vec<VariantKind>,
    pub cells: Vec<Cell>,
    pub runs: Vec<RunReport>,
}

impl Table {
    pub fn cell(&self, variant: VariantKind, domain: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.variant == variant && c.domain == domain)
    }

    /// Rows are test domains, columns are variants; each entry is the
    /// measured mean±std in percent with the published value beneath.
    pub fn render(&self) -> String {
        let width = 14;
        let mut out = format!("{:<10}", "domain");
        for v in &self.variants {
            out.push_str(&format!("{:>width$}", v.name()));
        }
        out.push('\n');
        for d in &self.domains {
            let mut ours = format!("{d:<10}");
            let mut reported = format!("{:<10}", "  reported");
            for v in &self.variants {
                let (o, p) = match self.cell(*v, d) {
                    Some(c) => (
                        format!("{:.1}±{:.1}", 100.0 * c.mean, 100.0 * c.std),
                        c.published.map_or("-".into(), |(m, s)| format!("{m:.1}±{s:.1}")),
                    ),
                    None => ("-".into(), "-".into()),
                };
                ours.push_str(&format!("{o:>width$}"));
                reported.push_str(&format!("{p:>width$}"));
            }
            out.push_str(&ours);
            out.push('\n');
            out.push_str(&reported);
            out.push('\n');
        }
        out
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Trains every configured variant over the seeds. Non-adaptive variants
/// are scored on all test domains from one run; adaptive variants get one
/// run per target domain and are scored on that domain only.
pub fn cmd_repro_table1(cfg: &ExperimentConfig) -> Result<Table> {
    let data = load_datasets(&cfg.data_dir())?;
    cfg.echo(&cfg.out_dir)?;
    let domains: Vec<String> = data.tests.iter().map(|(n, _)| n.clone()).collect();
    let targets = cfg.table.adaptation_targets.clone().unwrap_or_else(|| domains.clone());
    for t in &targets {
        data.test_index(t)?;
    }

    let mut plan: Vec<(VariantKind, u64, Option<String>)> = Vec::new();
    for &v in &cfg.table.variants {
        for seed in seeds(cfg) {
            if v.is_adaptation() {
                plan.extend(targets.iter().map(|t| (v, seed, Some(t.clone()))));
            } else {
                plan.push((v, seed, None));
            }
        }
    }
    let jobs = plan
        .iter()
        .map(|(v, seed, target)| {
            let data = &data;
            Box::new(move || {
                let dir = run_dir(&cfg.out_dir, *v, *seed, target.as_deref());
                let r = train_one(cfg, data, *v, *seed, target.as_deref(), &dir)?;
                eprintln!("{}", crate::train::format_report(&r));
                Ok(r)
            }) as Box<dyn FnOnce() -> Result<RunReport> + Send + '_>
        })
        .collect();
    let runs = run_jobs(cfg.parallel, jobs)?;

    let published = data.manifest.dataset == DatasetKind::ShiftedMnist;
    let mut cells = Vec::new();
    for &v in &cfg.table.variants {
        for (k, d) in domains.iter().enumerate() {
            let accuracies: Vec<f64> = runs
                .iter()
                .filter(|r| r.variant == v && r.target.as_ref().is_none_or(|t| t == d))
                .filter_map(|r| r.accuracy_on(d))
                .collect();
            if accuracies.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&accuracies);
            cells.push(Cell {
                variant: v,
                domain: d.clone(),
                accuracies,
                mean,
                std,
                published: if published { published_reference(v, k) } else { None },
            });
        }
    }
    let table = Table {
        domains,
        variants: cfg.table.variants.clone(),
        cells,
        runs,
    };
    std::fs::write(cfg.out_dir.join("table.txt"), table.render())?;
    std::fs::write(cfg.out_dir.join("table.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}
