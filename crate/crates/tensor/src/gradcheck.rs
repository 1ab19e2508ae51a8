//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule on the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self, tol: f64) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= tol).collect()
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Analytic gradients of `f` with respect to every parameter tensor.
pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    Ok((tape.value(loss).data()[0], grads))
}

/// Compare analytic gradients of `f` against central differences with step `h`.
pub fn check_gradients<F>(params: &[Tensor], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(params, &f)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..grad.numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = evaluate(&work, &f)?;
            work[pi].data_mut()[j] = orig - h;
            let down = evaluate(&work, &f)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            max_rel = max_rel.max(relative_error(a, numeric, floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        let analytic_norm = grad.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        report.push(ParamCheck {
            index: pi,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            analytic_norm,
        });
    }
    Ok(GradCheckReport { params: report })
}
