//! Command-line driver: dataset generation, training runs, theory checks and
//! the shifted-MNIST accuracy table.

pub mod config;
pub mod generate;
pub mod table;
pub mod theory_check;
pub mod train;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use csg::objectives::VariantKind;

pub use config::ExperimentConfig;
pub use generate::cmd_generate_data;
pub use table::cmd_repro_table1;
pub use theory_check::cmd_theory_check;
pub use train::cmd_train_eval;

#[derive(Debug, Parser)]
#[command(name = "csg", version, about = "Causal semantic generative models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write dataset containers and a manifest.
    GenerateData(Overrides),
    /// Train one variant over the configured seeds.
    Train(Overrides),
    /// Compare closed forms with Monte Carlo and evaluate bounds.
    TheoryCheck(Overrides),
    /// Train every variant and tabulate test accuracies.
    ReproTable1(Overrides),
}

/// Flags override the configuration file field by field.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = config::DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// `shifted-mnist` or `synthetic`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset generation seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated variants for the table.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warm_start_epochs: Option<usize>,
    #[arg(long)]
    pub cold_start: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub elbo_weight: Option<f64>,
    #[arg(long)]
    pub adaptation_weight: Option<f64>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub eval_mc: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
}

impl Overrides {
    /// The configuration file (or defaults) with these flags applied.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v.into();
                }
            };
        }
        set!(data_root => data_root);
        set!(data_dir => data_dir);
        set!(out_dir => out_dir);
        set!(mnist_dir => generate.mnist_dir);
        set!(data_seed => generate.seed);
        set!(limit => limit);
        set!(seeds => seeds);
        set!(seed => train.seed);
        set!(target => target);
        set!(epochs => train.epochs);
        set!(warm_start_epochs => train.warm_start_epochs);
        set!(batch_size => train.batch_size);
        set!(learning_rate => train.learning_rate);
        set!(elbo_weight => train.elbo_weight);
        set!(adaptation_weight => train.adaptation_weight);
        set!(n_mc => train.n_mc);
        set!(eval_mc => train.eval_mc);
        set!(samples => theory.samples);
        set!(pairs => theory.pairs);
        if let Some(d) = &self.dataset {
            c.generate.dataset = serde_json::from_value(serde_json::Value::String(d.clone()))
                .map_err(|_| anyhow::anyhow!("unknown dataset `{d}`"))?;
        }
        if let Some(v) = &self.variant {
            c.train.variant = VariantKind::parse(v)?;
        }
        if let Some(vs) = &self.variants {
            c.table.variants = vs.iter().map(|v| VariantKind::parse(v)).collect::<csg::Result<_>>()?;
        }
        c.parallel |= self.parallel;
        c.train.cold_start |= self.cold_start;
        c.train.validate()?;
        if c.seeds == 0 {
            anyhow::bail!("seeds must be at least 1");
        }
        Ok(c)
    }
}

/// Runs a parsed command line. Returns whether every requested check
/// passed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenerateData(o) => {
            let cfg = o.resolve()?;
            let m = cmd_generate_data(&cfg)?;
            for f in &m.files {
                println!("{:<12} {:>6} items  {:?}  sha256 {}", f.file, f.count, f.class_counts, f.sha256);
            }
            Ok(true)
        }
        Command::Train(o) => {
            let cfg = o.resolve()?;
            for r in cmd_train_eval(&cfg)? {
                println!("{}", train::format_report(&r));
            }
            Ok(true)
        }
        Command::TheoryCheck(o) => {
            let cfg = o.resolve()?;
            let report = cmd_theory_check(&cfg)?;
            print!("{}", report.render());
            Ok(report.pass())
        }
        Command::ReproTable1(o) => {
            let cfg = o.resolve()?;
            print!("{}", cmd_repro_table1(&cfg)?.render());
            Ok(true)
        }
    }
}
