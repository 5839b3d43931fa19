//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the backward rules it is checking.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, zero when both vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.relative_error)
            .fold(0.0, f64::max)
    }
}

/// Scalar value of `f` at `params`.
pub fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value().data()[0];
    Ok(v)
}

/// Analytic gradients of the scalar `f` with respect to every tensor in `params`.
pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|v| grads.wrt(*v)).collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, entry by entry.
pub fn numeric_gradients<F>(params: &[Tensor], step: f64, f: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = evaluate(&work, f)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = evaluate(&work, f)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares analytic and central-difference gradients for every parameter.
pub fn check_gradients<F>(params: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, step, &f)?;
    let params = analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff: f64 = libm::sqrt(
                a.data()
                    .iter()
                    .zip(n.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            );
            let scale = a.norm().max(n.norm());
            let relative_error = if scale == 0.0 { 0.0 } else { diff / scale };
            let max_abs_error = a.max_abs_diff(&n).expect("same shape");
            ParamCheck {
                analytic: a,
                numeric: n,
                relative_error,
                max_abs_error,
            }
        })
        .collect();
    Ok(GradCheckReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient_matches() {
        let p = Tensor::vector(alloc::vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_gradients(&[p], DEFAULT_STEP, |_, v| {
            v[0].square()?.mul(&v[0])?.sum()
        })
        .unwrap();
        assert!(report.worst_relative_error() < 1e-8);
        let a = &report.params[0].analytic;
        assert!((a.data()[1] - 3.0 * 1.44).abs() < 1e-12);
    }
}
