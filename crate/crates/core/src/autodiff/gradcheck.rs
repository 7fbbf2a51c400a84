//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::matrix::Matrix;

/// Analytic gradients of the scalar built by `loss` with respect to each of `params`.
pub fn analytic_gradients<F>(params: &[Matrix], loss: &F) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect())
}

fn evaluate<F>(params: &[Matrix], loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Central differences `(L(p + h) - L(p - h)) / 2h`, one coordinate at a time.
pub fn numeric_gradients<F>(params: &[Matrix], step: f64, loss: &F) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let orig = params[p].as_slice()[i];
            probe[p].as_mut_slice()[i] = orig + step;
            let plus = evaluate(&probe, loss)?;
            probe[p].as_mut_slice()[i] = orig - step;
            let minus = evaluate(&probe, loss)?;
            probe[p].as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max |a - n| / max(|a|, |n|, 1e-12)` over every coordinate.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.as_slice().iter().zip(n.as_slice()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of `loss` against central differences with the given step.
///
/// `loss` receives one leaf per entry of `params` and must be deterministic.
pub fn finite_difference_check<F>(params: &[Matrix], step: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &loss)?;
    let numeric = numeric_gradients(params, step, &loss)?;
    Ok(max_relative_error(&analytic, &numeric))
}
