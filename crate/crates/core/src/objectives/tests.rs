use rand::Rng as _;

use super::*;
use crate::autodiff::{gradient_check, DEFAULT_STEP};
use crate::gaussian::BlockCholeskyPrior;
use crate::model::{Activation, Arch, MlpArch, Params};
use crate::rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn micro_arch(d_s: usize, d_v: usize) -> Arch {
    Arch {
        x_dim: 3,
        enc_hidden: vec![4],
        enc_shared: 3,
        d_s,
        d_v,
        dec_s_units: 3,
        dec_hidden: vec![3],
        classes: 2,
        hidden: Activation::Sigmoid,
        latent: Activation::Identity,
    }
}

fn micro_model(seed: u64, d_s: usize, d_v: usize, test_prior: bool) -> CsgModel {
    let mut rng = rng::seeded(seed);
    let mut m = CsgModel::new(micro_arch(d_s, d_v), 0.5, &mut rng).unwrap();
    m.set_prior(&BlockCholeskyPrior::random(d_s, d_v, 0.5, &mut rng)).unwrap();
    if test_prior {
        m.add_test_prior();
        m.set_test_prior(&BlockCholeskyPrior::random(d_s, d_v, 0.5, &mut rng)).unwrap();
    }
    m
}

fn rand_x(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cfg(weight: f64, n_mc: usize) -> ObjectiveConfig {
    ObjectiveConfig {
        elbo_weight: weight,
        adaptation_weight: 0.3,
        n_mc,
        ..ObjectiveConfig::default()
    }
}

/// Evaluates `f` with every parameter bound as a constant.
fn eval<F>(model: &CsgModel, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    f(&tape, &p).unwrap().item()
}

fn per_row<F>(model: &CsgModel, f: F) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let p = model.params.bind(&tape, |_| false);
    let out = f(&tape, &p).unwrap();
    let v = out.value().data().to_vec();
    v
}

fn check_model_gradient<F>(params: &Params, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    gradient_check(
        |t, vars| f(t, &Bound::from_vars(vars.to_vec())),
        &params.values(),
        DEFAULT_STEP,
    )
    .unwrap()
}

fn ln_normal(x: f64, m: f64, sd: f64) -> f64 {
    -0.5 * ((x - m) / sd).powi(2) - sd.ln() - HALF_LN_2PI
}

fn ln_bivariate(sigma: &Tensor, s: f64, v: f64) -> f64 {
    let (a, b, d) = (sigma.at(0, 0), sigma.at(0, 1), sigma.at(1, 1));
    let det = a * d - b * b;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * (d * s * s - 2.0 * b * s * v + a * v * v) / det
}

fn ln_softmax_entry(logits: &[f64], y: usize) -> f64 {
    logits[y] - logsumexp(logits)
}

/// Scalar ingredients of a `d_s = d_v = 1` model at one datum and one draw.
struct Scalars {
    log_q: f64,
    log_p: f64,
    log_ps: f64,
    log_pv: f64,
    log_pt: f64,
    lik: f64,
    log_py: f64,
}

fn scalars(m: &CsgModel, x: &Tensor, y: usize, es: f64, ev: f64) -> Scalars {
    let (mean, scale) = m.encode_values(x).unwrap();
    let s = mean.at(0, 0) + scale.at(0, 0) * es;
    let v = mean.at(0, 1) + scale.at(0, 1) * ev;
    let log_q = ln_normal(s, mean.at(0, 0), scale.at(0, 0)) + ln_normal(v, mean.at(0, 1), scale.at(0, 1));
    let sigma = m.prior().covariance();
    let log_pt = m
        .test_prior()
        .map(|p| ln_bivariate(&p.covariance(), s, v))
        .unwrap_or(f64::NAN);
    let dec = m
        .decode_values(&Tensor::matrix(1, 1, vec![s]).unwrap(), Some(&Tensor::matrix(1, 1, vec![v]).unwrap()))
        .unwrap();
    let sx = m.likelihood.sigma_x;
    let lik = (0..x.cols()).map(|i| ln_normal(x.at(0, i), dec.at(0, i), sx)).sum();
    let w = m.params.get(m.head.w);
    let b = m.params.get(m.head.b);
    let logits = [s * w.at(0, 0) + b.data()[0], s * w.at(0, 1) + b.data()[1]];
    Scalars {
        log_q,
        log_p: ln_bivariate(&sigma, s, v),
        log_ps: ln_normal(s, 0.0, sigma.at(0, 0).sqrt()),
        log_pv: ln_normal(v, 0.0, sigma.at(1, 1).sqrt()),
        log_pt,
        lik,
        log_py: ln_softmax_entry(&logits, y),
    }
}

fn single_noise(es: f64, ev: f64) -> Noise {
    Noise {
        s: vec![Tensor::matrix(1, 1, vec![es]).unwrap()],
        v: vec![Tensor::matrix(1, 1, vec![ev]).unwrap()],
    }
}

#[test]
fn objectives_match_scalar_oracle() {
    let mut rng = rng::seeded(1);
    for trial in 0..10 {
        let m = micro_model(100 + trial, 1, 1, true);
        let x = rand_x(&mut rng, 1, 3);
        let y = (trial % 2) as usize;
        let (es, ev) = (rng::normal(&mut rng), rng::normal(&mut rng));
        let noise = single_noise(es, ev);
        let o = scalars(&m, &x, y, es, ev);
        for normalize_pi in [false, true] {
            let c = ObjectiveConfig {
                normalize_pi,
                ..cfg(0.37, 1)
            };
            // With one draw the normalized π is p(y|s): the ratio cancels.
            let keep = if normalize_pi { 0.0 } else { 1.0 };

            let eq2 = eval(&m, |t, p| csg_objective(&m, p, t.constant(x.clone()), &[y], &noise, &c));
            let want2 = o.log_py + c.elbo_weight * (o.log_p + o.lik - o.log_q);
            assert!((eq2 - want2).abs() < 1e-10, "{eq2} {want2}");

            let eq3 = eval(&m, |t, p| csg_ind_objective(&m, p, t.constant(x.clone()), &[y], &noise, &c));
            let want3 = (keep * (o.log_p - o.log_ps - o.log_pv) + o.log_py)
                + c.elbo_weight * (o.log_ps + o.log_pv + o.lik - o.log_q);
            assert!((eq3 - want3).abs() < 1e-10, "{eq3} {want3}");

            let eq5 = eval(&m, |t, p| csg_da_train_objective(&m, p, t.constant(x.clone()), &[y], &noise, &c));
            let want5 =
                (keep * (o.log_p - o.log_pt) + o.log_py) + c.elbo_weight * (o.log_pt + o.lik - o.log_q);
            assert!((eq5 - want5).abs() < 1e-10, "{eq5} {want5}");
        }
        let c = cfg(0.37, 1);

        let eq4 = eval(&m, |t, p| csg_da_test_elbo(&m, p, t.constant(x.clone()), &noise, &c));
        assert!((eq4 - (o.log_pt + o.lik - o.log_q)).abs() < 1e-10);
    }
}

#[test]
fn test_elbo_at_posterior_mean_is_pointwise() {
    let m = micro_model(2, 1, 1, true);
    let x = rand_x(&mut rng::seeded(2), 1, 3);
    let c = ObjectiveConfig {
        use_posterior_mean: true,
        ..cfg(1.0, 1)
    };
    let noise = Noise::for_model(&mut rng::seeded(0), &c, &m, 1);
    assert_eq!(noise, single_noise(0.0, 0.0));
    let o = scalars(&m, &x, 0, 0.0, 0.0);
    let e = eval(&m, |t, p| csg_da_test_elbo(&m, p, t.constant(x.clone()), &noise, &c));
    assert!((e - (o.log_pt + o.lik - o.log_q)).abs() < 1e-10);
}

#[test]
fn csgz_matches_scalar_oracle() {
    let mut rng = rng::seeded(3);
    let m = micro_model(3, 1, 0, true);
    let x = rand_x(&mut rng, 1, 3);
    let es = 0.4;
    let noise = Noise {
        s: vec![Tensor::matrix(1, 1, vec![es]).unwrap()],
        v: vec![Tensor::zeros(&[1, 0])],
    };
    let (mean, scale) = m.encode_values(&x).unwrap();
    let z = mean.at(0, 0) + scale.at(0, 0) * es;
    let log_q = ln_normal(z, mean.at(0, 0), scale.at(0, 0));
    let sd = m.prior().covariance().at(0, 0).sqrt();
    let sd_t = m.test_prior().unwrap().covariance().at(0, 0).sqrt();
    let dec = m.decode_values(&Tensor::matrix(1, 1, vec![z]).unwrap(), None).unwrap();
    let lik: f64 = (0..3).map(|i| ln_normal(x.at(0, i), dec.at(0, i), 0.5)).sum();
    let w = m.params.get(m.head.w);
    let b = m.params.get(m.head.b);
    let logits = [z * w.at(0, 0) + b.data()[0], z * w.at(0, 1) + b.data()[1]];
    let log_py = ln_softmax_entry(&logits, 1);
    let c = ObjectiveConfig {
        normalize_pi: false,
        ..cfg(0.25, 1)
    };

    let eq16 = eval(&m, |t, p| {
        csgz_objective(&m, p, t.constant(x.clone()), &[1], None, &noise, &c)
    });
    let want16 = log_py + 0.25 * (ln_normal(z, 0.0, sd) + lik - log_q);
    assert!((eq16 - want16).abs() < 1e-10);

    let eq1718 = eval(&m, |t, p| {
        let xt = t.constant(x.clone());
        csgz_objective(&m, p, xt, &[1], Some((xt, &noise)), &noise, &c)
    });
    let (lp, lpt) = (ln_normal(z, 0.0, sd), ln_normal(z, 0.0, sd_t));
    let want18 = (lp - lpt + log_py) + 0.25 * (lpt + lik - log_q);
    let want17 = lpt + lik - log_q;
    assert!((eq1718 - (want18 + c.adaptation_weight * want17)).abs() < 1e-10);

    let full = micro_model(3, 1, 1, false);
    assert!(matches!(
        eval_result(&full, &x, &noise, &c),
        Err(Error::Contract(_))
    ));
}

fn eval_result(m: &CsgModel, x: &Tensor, noise: &Noise, c: &ObjectiveConfig) -> Result<f64> {
    let tape = Tape::new();
    let p = m.params.bind(&tape, |_| false);
    Ok(csgz_objective(m, &p, tape.constant(x.clone()), &[0], None, noise, c)?.item())
}

#[test]
fn uniform_classifier_gives_minus_ln_k() {
    let mut m = micro_model(4, 1, 1, false);
    *m.params.get_mut(m.head.w) = Tensor::zeros(&[1, 2]);
    *m.params.get_mut(m.head.b) = Tensor::zeros(&[2]);
    let mut rng = rng::seeded(4);
    let x = rand_x(&mut rng, 5, 3);
    let c = cfg(0.0, 3);
    let noise = Noise::for_model(&mut rng, &c, &m, 5);
    let v = eval(&m, |t, p| csg_objective(&m, p, t.constant(x.clone()), &[0, 1, 1, 0, 1], &noise, &c));
    assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
    let q = q_y_given_x(&m, &x, &noise).unwrap();
    assert!(q.data().iter().all(|&p| p == 0.5));
}

#[test]
fn zero_weight_objective_is_negative_cross_entropy_of_q() {
    let m = micro_model(5, 2, 2, false);
    let mut rng = rng::seeded(5);
    let x = rand_x(&mut rng, 4, 3);
    let y = [1, 0, 0, 1];
    let c = cfg(0.0, 5);
    let noise = Noise::for_model(&mut rng, &c, &m, 4);
    let v = eval(&m, |t, p| csg_objective(&m, p, t.constant(x.clone()), &y, &noise, &c));
    let q = q_y_given_x(&m, &x, &noise).unwrap();
    let ce: f64 = y.iter().enumerate().map(|(i, &c)| q.at(i, c).ln()).sum::<f64>() / 4.0;
    assert!((v - ce).abs() < 1e-12);
}

#[test]
fn degenerate_posterior_predicts_at_the_mean() {
    let m = micro_model(6, 1, 1, false);
    let x = rand_x(&mut rng::seeded(6), 1, 3);
    let q = q_y_given_x(&m, &x, &Noise::zeros(1, 1, 1)).unwrap();
    let s = m.encode_values(&x).unwrap().0.at(0, 0);
    let w = m.params.get(m.head.w);
    let b = m.params.get(m.head.b);
    let logits = [s * w.at(0, 0) + b.data()[0], s * w.at(0, 1) + b.data()[1]];
    for y in 0..2 {
        assert!((q.at(0, y) - ln_softmax_entry(&logits, y).exp()).abs() < 1e-12);
    }
}

#[test]
fn q_y_given_x_is_monte_carlo_consistent() {
    let m = micro_model(7, 1, 1, false);
    let mut rng = rng::seeded(7);
    let x = rand_x(&mut rng, 3, 3);
    let small = q_y_given_x(&m, &x, &Noise::for_model(&mut rng, &cfg(1.0, 4096), &m, 3)).unwrap();
    let large = q_y_given_x(&m, &x, &Noise::for_model(&mut rng, &cfg(1.0, 65536), &m, 3)).unwrap();
    for (a, b) in small.data().iter().zip(large.data()) {
        assert!((a - b).abs() < 0.01);
    }
    for i in 0..3 {
        assert!((small.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn prediction_matches_quadrature_posterior() {
    let m = micro_model(8, 1, 1, false);
    let mut rng = rng::seeded(8);
    let x = rand_x(&mut rng, 1, 3);
    let pred = predict(&m, &x, &Noise::for_model(&mut rng, &cfg(1.0, 4096), &m, 1)).unwrap();
    let (mean, scale) = m.encode_values(&x).unwrap();
    let w = m.params.get(m.head.w);
    let b = m.params.get(m.head.b);
    let h = 1e-3;
    let mut exact = [0.0; 2];
    for i in 0..=20_000 {
        let e = -10.0 + i as f64 * h;
        let s = mean.at(0, 0) + scale.at(0, 0) * e;
        let logits = [s * w.at(0, 0) + b.data()[0], s * w.at(0, 1) + b.data()[1]];
        let wt = (-0.5 * e * e - HALF_LN_2PI).exp() * h;
        for (y, ex) in exact.iter_mut().enumerate() {
            *ex += wt * ln_softmax_entry(&logits, y).exp();
        }
    }
    let tv = 0.5 * (0..2).map(|y| (pred.probs.at(0, y) - exact[y]).abs()).sum::<f64>();
    assert!(tv < 0.02, "{tv}");
}

fn independent(m: &CsgModel) -> CsgModel {
    let mut m = m.clone();
    let mut p = m.prior();
    p.vs = Tensor::zeros(p.vs.shape());
    m.set_prior(&p).unwrap();
    m
}

fn equal_priors(m: &CsgModel) -> CsgModel {
    let mut m = m.clone();
    let p = m.prior();
    m.set_test_prior(&p).unwrap();
    m
}

#[test]
fn prior_collapse_identities() {
    let mut rng = rng::seeded(9);
    for trial in 0..5 {
        let base = micro_model(200 + trial, 2, 2, true);
        let x = rand_x(&mut rng, 4, 3);
        let y = [0, 1, 1, 0];
        let c = cfg(0.7, 3);
        let noise = Noise::for_model(&mut rng, &c, &base, 4);
        let xc = || x.clone();

        let m = independent(&base);
        let eq2 = eval(&m, |t, p| csg_objective(&m, p, t.constant(xc()), &y, &noise, &c));
        let eq3 = eval(&m, |t, p| csg_ind_objective(&m, p, t.constant(xc()), &y, &noise, &c));
        assert!((eq2 - eq3).abs() < 1e-9, "{eq2} {eq3}");
        let q = q_y_given_x(&m, &x, &noise).unwrap();
        let pi = pi_y_given_x(&m, &x, &noise, Reference::Independent).unwrap();
        for (a, b) in q.data().iter().zip(pi.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let val = validation_predict(&m, VariantKind::CsgInd, &x, &noise).unwrap();
        for (a, b) in q.data().iter().zip(val.probs.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let ind = predict(&m, &x, &noise).unwrap();
        assert_eq!(ind, predict(&m, &x, &noise).unwrap());

        let m = equal_priors(&base);
        let eq2 = eval(&m, |t, p| csg_objective(&m, p, t.constant(xc()), &y, &noise, &c));
        let eq5 = eval(&m, |t, p| csg_da_train_objective(&m, p, t.constant(xc()), &y, &noise, &c));
        assert!((eq2 - eq5).abs() < 1e-9, "{eq2} {eq5}");
        let pi = pi_y_given_x(&m, &x, &noise, Reference::Learned).unwrap();
        for (a, b) in q_y_given_x(&m, &x, &noise).unwrap().data().iter().zip(pi.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let z = equal_priors(&micro_model(300 + trial, 2, 0, true));
        let nz = Noise::for_model(&mut rng, &c, &z, 4);
        let eq16 = eval(&z, |t, p| csgz_objective(&z, p, t.constant(xc()), &y, None, &nz, &c));
        let eq18 = eval(&z, |t, p| csg_da_train_objective(&z, p, t.constant(xc()), &y, &nz, &c));
        assert!((eq16 - eq18).abs() < 1e-9);
    }
}

#[test]
fn csgz_equals_csg_when_v_is_inert() {
    // A d_v = 1 model whose decoder ignores v, whose prior keeps v
    // independent standard normal, and whose v posterior is exactly N(0, 1).
    let mut rng = rng::seeded(10);
    let mut full = micro_model(10, 1, 1, false);
    let mut zm = micro_model(11, 1, 0, false);
    let sw = full.encoder.shared.w;
    let w = full.params.get_mut(sw);
    for r in 0..w.rows() {
        w.set(r, 0, 0.0);
    }
    full.params.get_mut(full.encoder.shared.b).data_mut()[0] = 0.0;
    let vs = full.encoder.v_scale.unwrap();
    *full.params.get_mut(vs.w) = Tensor::zeros(&[1, 1]);
    let unit = (1.0f64 - crate::model::MIN_SCALE).exp_m1().ln();
    *full.params.get_mut(vs.b) = Tensor::vector(vec![unit]);
    let dh = full.decoder.hidden[0].w;
    let w = full.params.get_mut(dh);
    for c in 0..w.cols() {
        w.set(3, c, 0.0);
    }
    let mut prior = BlockCholeskyPrior::random(1, 1, 0.5, &mut rng);
    prior.vs = Tensor::zeros(&[1, 1]);
    prior.vv_off = Tensor::zeros(&[1, 1]);
    prior.vv_logdiag = Tensor::zeros(&[1]);
    full.set_prior(&prior).unwrap();

    for dst in zm.params.entries_mut() {
        let src = full.params.get(full.params.find(&dst.name).unwrap());
        if dst.name == "dec.h0.w" {
            let rows: Vec<Vec<f64>> = (0..3).map(|r| src.row(r).to_vec()).collect();
            dst.value = Tensor::from_rows(&rows).unwrap();
        } else if src.shape() == dst.value.shape() {
            dst.value = src.clone();
        }
    }
    let mut zp = zm.prior();
    zp.ss_logdiag = prior.ss_logdiag.clone();
    zm.set_prior(&zp).unwrap();

    let x = rand_x(&mut rng, 4, 3);
    let y = [1, 1, 0, 1];
    let c = cfg(0.9, 2);
    let noise = Noise::for_model(&mut rng, &c, &full, 4);
    let nz = Noise {
        s: noise.s.clone(),
        v: vec![Tensor::zeros(&[4, 0]); 2],
    };
    let a = eval(&full, |t, p| csg_objective(&full, p, t.constant(x.clone()), &y, &noise, &c));
    let b = eval(&zm, |t, p| csgz_objective(&zm, p, t.constant(x.clone()), &y, None, &nz, &c));
    assert!((a - b).abs() < 1e-9, "{a} {b}");
}

#[test]
fn interpretation_form_equals_csg_objective() {
    // log q(y|x) + Σ_y' E_q[p*(y'|x)/q(y'|x) p(y'|s) log(p(s,v,x,y')/(q(s,v|x) p(y'|s)))]
    // with a one-hot p*(y'|x), evaluated from per-draw scalars.
    let mut rng = rng::seeded(11);
    let m = micro_model(12, 1, 1, false);
    let x = rand_x(&mut rng, 1, 3);
    let y = 1;
    let draws: Vec<(f64, f64)> = (0..4).map(|_| (rng::normal(&mut rng), rng::normal(&mut rng))).collect();
    let noise = Noise {
        s: draws.iter().map(|d| Tensor::matrix(1, 1, vec![d.0]).unwrap()).collect(),
        v: draws.iter().map(|d| Tensor::matrix(1, 1, vec![d.1]).unwrap()).collect(),
    };
    let c = cfg(1.0, 4);
    let got = eval(&m, |t, p| csg_objective(&m, p, t.constant(x.clone()), &[y], &noise, &c));
    let sc: Vec<Scalars> = draws.iter().map(|&(a, b)| scalars(&m, &x, y, a, b)).collect();
    let n = sc.len() as f64;
    let q_y = sc.iter().map(|o| o.log_py.exp()).sum::<f64>() / n;
    let mut second = 0.0;
    for o in &sc {
        let joint = o.log_p + o.lik + o.log_py;
        second += o.log_py.exp() / q_y * (joint - (o.log_q + o.log_py)) / n;
    }
    let want = q_y.ln() + second;
    assert!((got - want).abs() < 1e-9, "{got} {want}");
}

#[test]
fn validation_pi_normalizes_and_keeps_the_argmax() {
    let m = micro_model(13, 2, 2, true);
    let mut rng = rng::seeded(13);
    let x = rand_x(&mut rng, 6, 3);
    let noise = Noise::for_model(&mut rng, &cfg(1.0, 8), &m, 6);
    for v in [VariantKind::CsgInd, VariantKind::CsgDa] {
        let pred = validation_predict(&m, v, &x, &noise).unwrap();
        let raw = pi_y_given_x(&m, &x, &noise, v.reference()).unwrap();
        for i in 0..6 {
            assert!((pred.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(pred.labels[i], argmax(raw.row(i)));
        }
    }
    assert!(matches!(
        validation_predict(&m, VariantKind::Csg, &x, &noise),
        Err(Error::Contract(_))
    ));
}

#[test]
fn normalized_supervision_is_the_log_validation_probability() {
    let m = micro_model(14, 2, 2, true);
    let mut rng = rng::seeded(14);
    let x = rand_x(&mut rng, 5, 3);
    let noise = Noise::for_model(&mut rng, &cfg(1.0, 6), &m, 5);
    for v in [VariantKind::CsgInd, VariantKind::CsgDa] {
        let probs = validation_predict(&m, v, &x, &noise).unwrap().probs;
        for y in 0..2 {
            let sup = per_row(&m, |t, p| {
                Ok(labeled_terms(&m, p, t.constant(x.clone()), &[y; 5], &noise, v.reference(), true)?.supervision)
            });
            for (i, s) in sup.iter().enumerate() {
                assert!((s - probs.at(i, y).ln()).abs() < 1e-10, "{v:?} {i} {y}");
            }
        }
    }
}

#[test]
fn argmax_prefers_the_lowest_index() {
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
}

#[test]
fn missing_test_prior_is_an_error() {
    let m = micro_model(14, 1, 1, false);
    let tape = Tape::new();
    let p = m.params.bind(&tape, |_| false);
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let noise = Noise::zeros(1, 1, 1);
    assert!(csg_da_test_elbo(&m, &p, x, &noise, &cfg(1.0, 1)).is_err());
    assert!(csg_da_train_objective(&m, &p, x, &[0], &noise, &cfg(1.0, 1)).is_err());
}

#[test]
fn non_finite_terms_are_named() {
    let mut m = micro_model(15, 1, 1, false);
    let x = Tensor::zeros(&[1, 3]);
    let noise = Noise::zeros(1, 1, 1);
    let run = |m: &CsgModel| {
        let tape = Tape::new();
        let p = m.params.bind(&tape, |_| false);
        csg_objective(m, &p, tape.constant(x.clone()), &[0], &noise, &cfg(1.0, 1)).map(|v| v.item())
    };
    let ob = m.decoder.out.b;
    m.params.get_mut(ob).data_mut()[0] = f64::NAN;
    assert!(matches!(run(&m), Err(Error::NonFiniteObjective { term: "elbo", .. })));
    let hb = m.head.b;
    m.params.get_mut(hb).data_mut()[0] = f64::NAN;
    assert!(matches!(run(&m), Err(Error::NonFiniteObjective { term: "supervision", .. })));
}

#[test]
fn extreme_logits_and_ratios_stay_finite() {
    let mut m = micro_model(16, 1, 1, true);
    *m.params.get_mut(m.head.b) = Tensor::vector(vec![1e3, -1e3]);
    let mut p = m.prior();
    p.vs = Tensor::matrix(1, 1, vec![40.0]).unwrap();
    p.vv_logdiag = Tensor::vector(vec![-4.0]);
    m.set_prior(&p).unwrap();
    let mut rng = rng::seeded(16);
    let x = rand_x(&mut rng, 3, 3);
    let c = cfg(1.0, 16);
    let noise = Noise::for_model(&mut rng, &c, &m, 3);
    for y in [0, 1] {
        let ys = [y; 3];
        for v in [VariantKind::Csg, VariantKind::CsgInd, VariantKind::CsgDa] {
            let val = eval(&m, |t, pp| {
                let xv = t.constant(x.clone());
                variant_objective(v, &m, pp, xv, &ys, Some((xv, &noise)), &noise, &c)
            });
            assert!(val.is_finite(), "{v} {y}");
        }
    }
    let pi = log_pi_y_given_x(&m, &x, &noise, Reference::Independent).unwrap();
    assert!(pi.is_finite());
}

#[test]
fn every_objective_passes_gradient_check() {
    let mut rng = rng::seeded(17);
    for (d_s, d_v) in [(1, 1), (2, 2), (2, 0)] {
        let m = micro_model(400 + d_s as u64 + d_v as u64, d_s, d_v, true);
        let x = rand_x(&mut rng, 3, 3);
        let xt = rand_x(&mut rng, 2, 3);
        let y = [0, 1, 1];
        let c = ObjectiveConfig {
            train_decoder_on_target: true,
            ..cfg(0.6, 2)
        };
        let noise = Noise::for_model(&mut rng, &c, &m, 3);
        let nt = Noise::for_model(&mut rng, &c, &m, 2);
        let variants: &[VariantKind] = if d_v == 0 {
            &[VariantKind::Csgz, VariantKind::CsgzDa]
        } else {
            &[VariantKind::Csg, VariantKind::CsgInd, VariantKind::CsgDa]
        };
        for &v in variants {
            let err = check_model_gradient(&m.params, |t, p| {
                let xt = t.constant(xt.clone());
                variant_objective(v, &m, p, t.constant(x.clone()), &y, Some((xt, &nt)), &noise, &c)
            });
            assert!(err < 1e-4, "{v} ({d_s},{d_v}): {err}");
        }
        let err = check_model_gradient(&m.params, |t, p| {
            csg_da_test_elbo(&m, p, t.constant(xt.clone()), &nt, &c)
        });
        assert!(err < 1e-4, "test elbo: {err}");
    }
}

#[test]
fn frozen_decoder_receives_no_target_gradient() {
    let m = micro_model(18, 2, 2, true);
    let mut rng = rng::seeded(18);
    let x = rand_x(&mut rng, 3, 3);
    let c = cfg(1.0, 1);
    let noise = Noise::for_model(&mut rng, &c, &m, 3);
    let grads = |train_decoder: bool| {
        let c = ObjectiveConfig {
            train_decoder_on_target: train_decoder,
            ..c
        };
        let tape = Tape::new();
        let p = m.bind(&tape);
        let e = csg_da_test_elbo(&m, &p, tape.constant(x.clone()), &noise, &c).unwrap();
        tape.backward(e).unwrap();
        p.grads()
    };
    let (frozen, free) = (grads(false), grads(true));
    for (e, (a, b)) in m.params.entries().iter().zip(frozen.iter().zip(&free)) {
        match e.group {
            Group::Decoder => {
                assert_eq!(a.max_abs(), 0.0);
                assert!(b.max_abs() > 0.0);
            }
            _ => assert_eq!(a, b),
        }
    }
}

#[test]
fn all_networks_get_finite_gradients() {
    let mut rng = rng::seeded(19);
    let m = micro_model(19, 2, 2, true);
    let x = rand_x(&mut rng, 4, 3);
    let c = cfg(1e-2, 1);
    let noise = Noise::for_model(&mut rng, &c, &m, 4);
    for v in [VariantKind::Csg, VariantKind::CsgInd, VariantKind::CsgDa] {
        let tape = Tape::new();
        let p = m.bind(&tape);
        let xv = tape.constant(x.clone());
        let o = variant_objective(v, &m, &p, xv, &[0, 1, 0, 1], Some((xv, &noise)), &noise, &c).unwrap();
        tape.backward(o).unwrap();
        let g = p.grads();
        assert!(g.iter().all(|t| t.is_finite()));
        for group in [Group::Encoder, Group::Decoder, Group::Classifier, Group::Prior] {
            let reached = m
                .params
                .entries()
                .iter()
                .zip(&g)
                .any(|(e, t)| e.group == group && t.max_abs() > 0.0);
            assert!(reached, "{v} {group:?}");
        }
    }
}

#[test]
fn ce_objective_cases() {
    let mut rng = rng::seeded(20);
    let arch = MlpArch {
        x_dim: 3,
        hidden: vec![4, 3],
        classes: 2,
    };
    let mut mlp = Mlp::new(arch, &mut rng).unwrap();
    let x = rand_x(&mut rng, 4, 3);
    let y = [0, 1, 1, 0];
    let err = gradient_check(
        |t, vars| ce_objective(&mlp, &Bound::from_vars(vars.to_vec()), t.constant(x.clone()), &y),
        &mlp.params.values(),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    for e in mlp.params.entries_mut() {
        e.value = Tensor::zeros(e.value.shape());
    }
    let value = |mlp: &Mlp, y: &[usize]| {
        let tape = Tape::new();
        let p = mlp.params.bind(&tape, |_| false);
        ce_objective(mlp, &p, tape.constant(x.clone()), y).unwrap().item()
    };
    assert!((value(&mlp, &y) + std::f64::consts::LN_2).abs() < 1e-15);
    let last = mlp.layers.last().unwrap().b;
    *mlp.params.get_mut(last) = Tensor::vector(vec![1e3, -1e3]);
    assert!(value(&mlp, &[0; 4]) >= -1e-6);
    let pred = predict_baseline(&mlp, &x).unwrap();
    assert_eq!(pred.labels, vec![0; 4]);
}

/// Trapezoid rule on `[-half, half]` with step `h`, as `(node, log weight)`
/// pairs for a standard-normal expectation.
fn normal_grid(half: f64, h: f64) -> Vec<(f64, f64)> {
    let n = (2.0 * half / h).round() as usize;
    (0..=n)
        .map(|i| {
            let e = -half + i as f64 * h;
            (e, -0.5 * e * e - HALF_LN_2PI + h.ln())
        })
        .collect()
}

/// `log ∫ p°(z) p(x|z) [p(y|s)] dz` on a latent grid; `y = None` drops the
/// label factor.
fn log_evidence(m: &CsgModel, prior: &BlockCholeskyPrior, x: &[f64], y: Option<usize>) -> f64 {
    let h = 0.04;
    let axis: Vec<f64> = (0..=500).map(|i| -10.0 + i as f64 * h).collect();
    let two_d = m.arch.d_v == 1;
    let pts: Vec<(f64, f64)> = if two_d {
        axis.iter().flat_map(|&s| axis.iter().map(move |&v| (s, v))).collect()
    } else {
        axis.iter().map(|&s| (s, 0.0)).collect()
    };
    let n = pts.len();
    let s = Tensor::matrix(n, 1, pts.iter().map(|p| p.0).collect()).unwrap();
    let v = Tensor::matrix(n, 1, pts.iter().map(|p| p.1).collect()).unwrap();
    let dec = m.decode_values(&s, two_d.then_some(&v)).unwrap();
    let sigma = prior.covariance();
    let w = m.params.get(m.head.w);
    let b = m.params.get(m.head.b);
    let sx = m.likelihood.sigma_x;
    let terms: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, &(s, v))| {
            let lp = if two_d {
                ln_bivariate(&sigma, s, v)
            } else {
                ln_normal(s, 0.0, sigma.at(0, 0).sqrt())
            };
            let lik: f64 = x.iter().enumerate().map(|(j, &xj)| ln_normal(xj, dec.at(i, j), sx)).sum();
            let ly = y.map_or(0.0, |y| {
                let logits = [s * w.at(0, 0) + b.data()[0], s * w.at(0, 1) + b.data()[1]];
                ln_softmax_entry(&logits, y)
            });
            lp + lik + ly
        })
        .collect();
    logsumexp(&terms) + if two_d { 2.0 } else { 1.0 } * h.ln()
}

/// Expectation over the encoder posterior of a per-draw value, on a grid.
fn posterior_expectation<F>(m: &CsgModel, x: &[f64], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>, Var<'t>, &Noise) -> Result<Var<'t>>,
{
    let grid = normal_grid(8.0, 0.05);
    let two_d = m.arch.d_v == 1;
    let pts: Vec<(f64, f64, f64)> = if two_d {
        grid.iter()
            .flat_map(|&(a, wa)| grid.iter().map(move |&(b, wb)| (a, b, wa + wb)))
            .collect()
    } else {
        grid.iter().map(|&(a, w)| (a, 0.0, w)).collect()
    };
    let n = pts.len();
    let noise = Noise {
        s: vec![Tensor::matrix(n, 1, pts.iter().map(|p| p.0).collect()).unwrap()],
        v: vec![Tensor::matrix(n, m.arch.d_v, if two_d { pts.iter().map(|p| p.1).collect() } else { vec![] }).unwrap()],
    };
    let xs = Tensor::matrix(n, x.len(), (0..n).flat_map(|_| x.iter().copied()).collect()).unwrap();
    let vals = per_row(m, |t, p| f(t, p, t.constant(xs.clone()), &noise));
    vals.iter().zip(&pts).map(|(v, p)| v * p.2.exp()).sum()
}

#[test]
fn every_elbo_lies_below_the_quadrature_evidence() {
    for (d_v, seed) in [(1usize, 21u64), (0, 22)] {
        let m = micro_model(seed, 1, d_v, true);
        let x = [0.3, -0.4, 0.8];
        let y = 1;
        let p = m.prior();
        let pt = m.test_prior().unwrap();
        let mr = &m;
        let labeled = |r: Reference| {
            posterior_expectation(mr, &x, move |_, b, xv, noise| {
                let n = xv.shape()[0];
                let t = labeled_terms(mr, b, xv, &vec![y; n], noise, r, false)?;
                t.supervision.add(t.elbo)
            })
        };
        let evidence_xy = log_evidence(&m, &p, &x, Some(y));
        let evidence_x = log_evidence(&m, &p, &x, None);
        assert!(evidence_xy <= evidence_x);
        for r in [Reference::Training, Reference::Independent, Reference::Learned] {
            let e = labeled(r);
            assert!(evidence_xy - e >= -1e-6, "{r:?} d_v={d_v}: {evidence_xy} < {e}");
        }
        let test = posterior_expectation(&m, &x, |_, b, xv, noise| test_elbo_terms(&m, b, b, xv, noise));
        let evidence_t = log_evidence(&m, &pt, &x, None);
        assert!(evidence_t - test >= -1e-6, "{evidence_t} < {test}");
        // The bound is not vacuous.
        assert!(evidence_t - test < 5.0);
    }
}

#[test]
fn test_elbo_is_tight_at_the_exact_posterior() {
    // Linear decoder x = A z + c + N(0, σ²I) with the test prior chosen so
    // that the posterior precision D = Σ̃⁻¹ + AᵀA/σ² is diagonal.
    let mut rng = rng::seeded(23);
    let mut arch = micro_arch(1, 1);
    arch.hidden = Activation::Identity;
    let mut m = CsgModel::new(arch, 0.5, &mut rng).unwrap();
    m.add_test_prior();
    let c0 = m.decode_values(&Tensor::zeros(&[1, 1]), Some(&Tensor::zeros(&[1, 1]))).unwrap();
    let e_s = m.decode_values(&Tensor::full(&[1, 1], 1.0), Some(&Tensor::zeros(&[1, 1]))).unwrap();
    let e_v = m.decode_values(&Tensor::zeros(&[1, 1]), Some(&Tensor::full(&[1, 1], 1.0))).unwrap();
    let a: Vec<[f64; 2]> = (0..3).map(|i| [e_s.at(0, i) - c0.at(0, i), e_v.at(0, i) - c0.at(0, i)]).collect();
    let s2 = 0.25;
    let ata = |i: usize, j: usize| a.iter().map(|r| r[i] * r[j]).sum::<f64>() / s2;
    let lam = ata(0, 0) + ata(1, 1) + 1.0;
    let prec = [[lam - ata(0, 0), -ata(0, 1)], [-ata(0, 1), lam - ata(1, 1)]];
    let det = prec[0][0] * prec[1][1] - prec[0][1] * prec[1][0];
    let cov = Tensor::from_rows(&[
        vec![prec[1][1] / det, -prec[0][1] / det],
        vec![-prec[1][0] / det, prec[0][0] / det],
    ])
    .unwrap();
    m.set_test_prior(&BlockCholeskyPrior::from_covariance(&cov, 1).unwrap()).unwrap();

    let x = [0.2, -0.5, 0.9];
    let r: Vec<f64> = (0..3).map(|i| x[i] - c0.at(0, i)).collect();
    let atr = |j: usize| a.iter().zip(&r).map(|(row, ri)| row[j] * ri).sum::<f64>() / s2;
    let mean = [atr(0) / lam, atr(1) / lam];
    let sd = lam.powf(-0.5);

    // Evidence: x ~ N(c, A Σ̃ Aᵀ + σ²I).
    let mut marg = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            let mut v = if i == j { s2 } else { 0.0 };
            for k in 0..2 {
                for l in 0..2 {
                    v += a[i][k] * cov.at(k, l) * a[j][l];
                }
            }
            marg.set(i, j, v);
        }
    }
    let evidence = crate::oracle::dense_gaussian_logpdf(&marg, &r);

    let noise = Noise::for_model(&mut rng, &cfg(1.0, 1), &m, 8);
    let vals = per_row(&m, |t, p| {
        let q = Posterior {
            s_mean: t.constant(Tensor::full(&[8, 1], mean[0])),
            s_scale: t.constant(Tensor::full(&[8, 1], sd)),
            v_mean: Some(t.constant(Tensor::full(&[8, 1], mean[1]))),
            v_scale: Some(t.constant(Tensor::full(&[8, 1], sd))),
        };
        let xs = t.constant(Tensor::matrix(8, 3, x.repeat(8)).unwrap());
        test_elbo_with(&m, p, p, xs, &q, &noise)
    });
    for v in vals {
        assert!((v - evidence).abs() < 1e-6, "{v} {evidence}");
    }
}

#[test]
fn variant_names_round_trip() {
    for v in VariantKind::ALL {
        assert_eq!(VariantKind::parse(v.name()).unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, format!("\"{}\"", v.name()));
    }
    assert!(VariantKind::parse("bogus").is_err());
}
