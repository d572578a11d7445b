//! Numerical checks of the theory with pass/fail verdicts.

use anyhow::Result;
use csg::data::{split_train_validation, synth_csg_sample, SyntheticCsgSpec};
use csg::objectives::VariantKind;
use csg::rng::{self, Rng};
use csg::theory::{
    delta_bound, fisher_divergence_direct, fisher_divergence_gaussian, fisher_divergence_score_matching,
    gaussian_score, mixing_score, ood_error_bound, sample_gaussian, LinearGaussian1d, McEstimate,
};
use csg::trainer::{self, Architectures, TrainConfig, TrainData, Trained};
use csg::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, IdentificationConfig, TheoryCheckConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub checks: Vec<Check>,
    pub identification: Option<TrendReport>,
}

impl TheoryReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            out.push_str(&format!("{verdict} {:<24} {}\n", c.name, c.detail));
        }
        out
    }
}

/// `AAᵀ/d + ½I` with standard normal `A`.
pub fn random_spd(d: usize, rng: &mut Rng) -> Tensor {
    let a = Tensor::matrix(d, d, rng::normal_vec(rng, d * d)).expect("square");
    let mut s = a.matmul(&a.transpose()).expect("square").scale(1.0 / d as f64);
    for i in 0..d {
        s.set(i, i, s.at(i, i) + 0.5);
    }
    s
}

/// Closed-form Fisher divergence of a pair against the score-matching and
/// direct Monte-Carlo estimates over samples from the test prior.
pub fn fisher_pair(
    sigma: &Tensor,
    sigma_test: &Tensor,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, McEstimate, McEstimate)> {
    let closed = fisher_divergence_gaussian(sigma, sigma_test)?;
    let z = sample_gaussian(sigma_test, samples, rng)?;
    let sp = gaussian_score(sigma)?;
    let st = gaussian_score(sigma_test)?;
    let sm = fisher_divergence_score_matching(&sp, &st, &z)?;
    let direct = fisher_divergence_direct(&sp, &st, &z)?;
    Ok((closed, sm, direct))
}

pub fn run_checks(t: &TheoryCheckConfig) -> Result<TheoryReport> {
    let mut rng = rng::seeded(t.seed);
    let mut checks = Vec::new();

    let sigma = random_spd(t.max_dim, &mut rng);
    let same = fisher_divergence_gaussian(&sigma, &sigma)? + t.closed_form_offset;
    checks.push(Check {
        name: "fisher-identical".into(),
        pass: same.abs() <= t.zero_tolerance,
        detail: serde_json::json!({ "dim": t.max_dim, "fisher": same }),
    });

    for i in 0..t.pairs {
        let d = 1 + i % t.max_dim;
        let sigma = random_spd(d, &mut rng);
        let sigma_test = random_spd(d, &mut rng);
        let (closed, sm, direct) = fisher_pair(&sigma, &sigma_test, t.samples, &mut rng)?;
        let closed = closed + t.closed_form_offset;
        checks.push(Check {
            name: format!("fisher-mc-{i}"),
            pass: sm.agrees_with(closed, t.se_tolerance) && direct.agrees_with(closed, t.se_tolerance),
            detail: serde_json::json!({
                "dim": d,
                "closed_form": closed,
                "score_matching": sm,
                "direct": direct,
            }),
        });
    }

    for &sigma_mu in &t.sigma_mus {
        let lg = LinearGaussian1d {
            gain: t.linear.gain,
            slope: t.linear.slope,
            var: t.linear.var,
            var_test: t.linear.var_test,
            sigma_mu,
        };
        let lhs = lg.ood_error();
        let bound = lg.bound()?;
        checks.push(Check {
            name: format!("ood-bound-{sigma_mu}"),
            pass: lhs <= bound,
            detail: serde_json::json!({ "lhs": lhs, "bound": bound, "fisher": lg.fisher()? }),
        });
    }

    if let Some(c) = &t.constants {
        let fisher = t.fisher.unwrap_or(0.0);
        checks.push(Check {
            name: "bounds-explicit".into(),
            pass: true,
            detail: serde_json::json!({
                "ood_error_bound": ood_error_bound(c, fisher)?,
                "delta_bound": delta_bound(c),
                "fisher": fisher,
            }),
        });
    }

    let identification = match &t.identification {
        Some(cfg) => {
            let trend = identification_trend(cfg)?;
            checks.push(Check {
                name: "identification-trend".into(),
                pass: trend.pass,
                detail: serde_json::json!({
                    "agreeing": trend.agreeing,
                    "required": cfg.min_agreeing,
                    "mixing_scores": trend.mixing_scores,
                }),
            });
            Some(trend)
        }
        None => None,
    };
    Ok(TheoryReport { checks, identification })
}

/// Writes `report.json` and `report.txt` into the output directory.
pub fn cmd_theory_check(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    cfg.echo(&cfg.out_dir)?;
    let report = run_checks(&cfg.theory)?;
    std::fs::write(cfg.out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(cfg.out_dir.join("report.txt"), report.render())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub sigma_mus: Vec<f64>,
    /// Per seed, one mixing score per noise level.
    pub mixing_scores: Vec<Vec<f64>>,
    /// Seeds whose scores do not increase as the noise shrinks.
    pub agreeing: usize,
    pub pass: bool,
}

/// Posterior means of `s` from a trained CSG.
pub fn semantic_means(model: &Trained, x: &Tensor, d_s: usize) -> Result<Tensor> {
    let Trained::Csg(m) = model else {
        anyhow::bail!("semantic means need a generative model");
    };
    let (mean, _) = m.encode_values(x)?;
    let rows: Vec<Vec<f64>> = (0..mean.rows()).map(|i| mean.row(i)[..d_s].to_vec()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Mixing score of a CSG trained on `spec` data with the given seed.
pub fn trained_mixing_score(spec: &SyntheticCsgSpec, cfg: &IdentificationConfig, seed: u64) -> Result<f64> {
    let base = seed.wrapping_mul(1_000_003);
    let pool = synth_csg_sample(spec, cfg.n_train, base + 1, "synthetic-train")?;
    let eval = synth_csg_sample(spec, cfg.n_eval, base + 2, "synthetic-eval")?;
    let (train, validation) = split_train_validation(&pool, 0.8, seed)?;
    let tc = TrainConfig {
        variant: VariantKind::Csg,
        seed,
        sigma_x: if cfg.match_noise { spec.sigma_mu } else { cfg.train.sigma_x },
        ..cfg.train.clone()
    };
    let archs = Architectures::synthetic(spec.d_s + spec.d_v, spec.d_s, spec.d_v, cfg.hidden);
    let data = TrainData {
        train: &train,
        validation: &validation,
        tests: &[],
        target: None,
    };
    let (_, model) = trainer::train(&tc, &archs, data, None)?;
    let s_hat = semantic_means(&model, &eval.x, spec.d_s)?;
    let latents = eval.latents.as_ref().expect("synthetic samples carry latents");
    Ok(mixing_score(&s_hat, &latents.s, &latents.v)?)
}

pub fn identification_trend(cfg: &IdentificationConfig) -> Result<TrendReport> {
    let spec = SyntheticCsgSpec::correlated(1, 1, cfg.rho, cfg.sigma_mus[0], cfg.ground_truth_seed)?;
    let mut mixing_scores = Vec::new();
    for seed in 0..cfg.seeds as u64 {
        let row = cfg
            .sigma_mus
            .iter()
            .map(|&s| trained_mixing_score(&spec.with_sigma_mu(s), cfg, seed))
            .collect::<Result<Vec<f64>>>()?;
        mixing_scores.push(row);
    }
    let agreeing = mixing_scores.iter().filter(|r| r.windows(2).all(|w| w[1] <= w[0])).count();
    Ok(TrendReport {
        sigma_mus: cfg.sigma_mus.clone(),
        mixing_scores,
        agreeing,
        pass: agreeing >= cfg.min_agreeing,
    })
}
