use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest relative discrepancy between reverse-mode gradients and central
/// finite differences of `f` at `theta`.
///
/// The error for a coordinate is `|analytic − fd| / max(1, |fd|)`.
pub fn gradient_check<F>(f: F, theta: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = theta.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars)?;
    if !root.item().is_finite() {
        return Err(Error::NonFiniteCoordinate {
            coordinate: 0,
            context: "objective at the base point".into(),
        });
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor> = theta
        .iter()
        .zip(&vars)
        .map(|(t, v)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |params: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut work = theta.to_vec();
    let mut coordinate = 0;
    for (ti, t) in theta.iter().enumerate() {
        for k in 0..t.len() {
            let base = t.data()[k];
            work[ti].data_mut()[k] = base + step;
            let plus = eval(&work);
            work[ti].data_mut()[k] = base - step;
            let minus = eval(&work);
            work[ti].data_mut()[k] = base;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::NonFiniteCoordinate {
                        coordinate,
                        context: e.to_string(),
                    })
                }
                _ => {
                    return Err(Error::NonFiniteCoordinate {
                        coordinate,
                        context: "finite-difference evaluation".into(),
                    })
                }
            };
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic[ti].data()[k];
            let err = (an - fd).abs() / fd.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFiniteCoordinate {
                    coordinate,
                    context: "analytic gradient".into(),
                });
            }
            worst = worst.max(err);
            coordinate += 1;
        }
    }
    Ok(worst)
}
