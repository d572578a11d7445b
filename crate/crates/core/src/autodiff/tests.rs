use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn logsumexp_of_zeros_is_ln2() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.0, 0.0]));
    let y = x.logsumexp(None).unwrap();
    assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn sigmoid_softplus_at_zero() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let s = x.sigmoid();
    assert_eq!(s.item(), 0.5);
    assert!((x.softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 0.25);
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = x.square().sum();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let a = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    assert_eq!(*i.matmul(av).unwrap().value(), a);
}

#[test]
fn non_scalar_root_is_rejected() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x.square()), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = x.square();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 12.0);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn shape_errors_name_the_primitive() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    match a.add(b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(a.matmul(a), Err(Error::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn domain_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(a.log(), Err(Error::Domain { op: "log", .. })));
    let one = tape.scalar(1.0);
    assert!(matches!(one.div(a), Err(Error::Domain { op: "div", .. })));
}

#[test]
fn broadcasting_rows_and_columns() {
    let tape = Tape::new();
    let m = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let r = tape.constant(Tensor::vector(vec![10., 20., 30.]));
    let c = tape.constant(Tensor::matrix(2, 1, vec![100., 200.]).unwrap());
    assert_eq!(m.add(r).unwrap().value().data(), &[11., 22., 33., 14., 25., 36.]);
    assert_eq!(m.add(c).unwrap().value().data(), &[101., 102., 103., 204., 205., 206.]);
    assert_eq!(m.mul(tape.scalar(2.0)).unwrap().value().data(), &[2., 4., 6., 8., 10., 12.]);
}

#[test]
fn gradient_check_quadratic_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let theta = rand_tensor(&mut rng, &[4, 1], -2.0, 2.0);
    let err = gradient_check(
        |t, p| {
            let a = t.constant(a.clone());
            let ax = a.matmul(p[0])?;
            Ok(p[0].mul(ax)?.sum())
        },
        &[theta],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn gradient_check_reports_nan_region() {
    let res = gradient_check(
        |_, p| Ok(p[0].log()?.sum()),
        &[Tensor::vector(vec![1e-7])],
        1e-5,
    );
    assert!(matches!(res, Err(Error::NonFiniteCoordinate { coordinate: 0, .. })));
}

fn check_primitive<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..100 {
        let theta: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
        let err = gradient_check(&f, &theta, DEFAULT_STEP).unwrap();
        assert!(err < tol, "{name} trial {trial}: {err}");
    }
}

#[test]
fn primitives_pass_gradient_check() {
    let tol = 1e-6;
    check_primitive("add", &[&[3, 2], &[2]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].add(p[1])?.square().sum())
    });
    check_primitive("sub", &[&[3, 2], &[3, 1]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].sub(p[1])?.square().sum())
    });
    check_primitive("mul", &[&[3, 2], &[]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].mul(p[1])?.square().sum())
    });
    check_primitive("div", &[&[3, 2], &[2]], 0.5, 2.0, tol, |_, p| {
        Ok(p[0].div(p[1])?.sum())
    });
    check_primitive("exp", &[&[4]], -1.0, 1.0, tol, |_, p| Ok(p[0].exp().sum()));
    check_primitive("log", &[&[4]], 0.5, 2.0, tol, |_, p| Ok(p[0].log()?.sum()));
    check_primitive("neg", &[&[4]], -1.0, 1.0, tol, |_, p| Ok(p[0].neg().square().sum()));
    check_primitive("sigmoid", &[&[2, 3]], -3.0, 3.0, tol, |_, p| Ok(p[0].sigmoid().sum()));
    check_primitive("softplus", &[&[2, 3]], -3.0, 3.0, tol, |_, p| Ok(p[0].softplus().sum()));
    check_primitive("square", &[&[5]], -2.0, 2.0, tol, |_, p| Ok(p[0].square().sum()));
    check_primitive("sum_axis0", &[&[3, 4]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].sum_axis(0)?.square().sum())
    });
    check_primitive("sum_axis1", &[&[3, 4]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].sum_axis(1)?.square().sum())
    });
    check_primitive("lse_all", &[&[3, 4]], -2.0, 2.0, tol, |_, p| p[0].logsumexp(None));
    check_primitive("lse_row", &[&[3, 4]], -2.0, 2.0, tol, |_, p| {
        Ok(p[0].logsumexp(Some(1))?.square().sum())
    });
    check_primitive("lse_col", &[&[3, 4]], -2.0, 2.0, tol, |_, p| {
        Ok(p[0].logsumexp(Some(0))?.square().sum())
    });
    check_primitive("matmul", &[&[3, 4], &[4, 2]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].matmul(p[1])?.square().sum())
    });
    check_primitive("transpose", &[&[3, 4], &[3, 4]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].transpose()?.matmul(p[1])?.sum())
    });
    check_primitive("slice_concat", &[&[3, 4], &[3, 2]], -1.0, 1.0, tol, |_, p| {
        let s = p[0].slice_cols(1, 2)?;
        Ok(s.concat_cols(p[1])?.square().sum())
    });
    check_primitive("reshape", &[&[2, 3]], -1.0, 1.0, tol, |_, p| {
        Ok(p[0].reshape(&[3, 2])?.square().sum_axis(1)?.square().sum())
    });
}

#[test]
fn triangular_primitives_pass_gradient_check() {
    let tol = 1e-6;
    check_primitive("make_lower_solve", &[&[3, 3], &[3], &[4, 3]], -0.5, 0.5, tol, |t, p| {
        let l = t.make_lower(p[0], p[1])?;
        Ok(t.solve_lower(l, p[2])?.square().sum())
    });
    check_primitive("cholesky", &[&[3, 3], &[3]], -0.5, 0.5, tol, |t, p| {
        let l = t.make_lower(p[0], p[1])?;
        let a = l.matmul(l.transpose()?)?;
        let c = t.cholesky(a)?;
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.3, -1.0, 2.0], vec![0.7, 0.2, -0.4]]).unwrap());
        Ok(c.mul(w)?.sum())
    });
}

#[test]
fn logsumexp_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, &[6], -5.0, 5.0);
        let c: f64 = rng.random_range(-1e4..1e4);
        let tape = Tape::new();
        let a = tape.constant(x.clone()).logsumexp(None).unwrap().item();
        let b = tape.constant(x.map(|v| v + c)).logsumexp(None).unwrap().item();
        assert!((b - (a + c)).abs() < 1e-9, "{a} {b} {c}");
    }
}

#[test]
fn fan_out_accumulates_both_paths() {
    let x0 = Tensor::vector(vec![0.3, -0.7, 1.1]);
    let f = |t: &Tape, p: &[Var<'_>]| -> Result<f64> {
        let _ = t;
        let x = p[0];
        let a = x.sigmoid();
        let b = x.square();
        Ok(a.mul(b).unwrap().add(x.exp()).unwrap().sum().item())
    };
    let tape = Tape::new();
    let x = tape.param(x0.clone());
    let a = x.sigmoid();
    let b = x.square();
    let y = a.mul(b).unwrap().add(x.exp()).unwrap().sum();
    tape.backward(y).unwrap();
    let g = tape.grad(x).unwrap();
    for k in 0..3 {
        let mut p = x0.clone();
        p.data_mut()[k] += 1e-6;
        let t1 = Tape::new();
        let up = f(&t1, &[t1.constant(p.clone())]).unwrap();
        p.data_mut()[k] -= 2e-6;
        let t2 = Tape::new();
        let dn = f(&t2, &[t2.constant(p)]).unwrap();
        let fd = (up - dn) / 2e-6;
        assert!((fd - g.data()[k]).abs() < 1e-7);
    }
}

#[test]
fn each_record_visited_once() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let mut y = x;
    for _ in 0..10 {
        y = y.add(x).unwrap();
    }
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 11.0);
}
