//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// entries whose absolute error exceeds `atol`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape and one parameter [`Var`] per entry of
/// `inputs` and must return a scalar. An entry fails when its absolute error
/// exceeds `atol` and its relative error exceeds `rtol`.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, rtol: f64, atol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (grad[k] - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > atol {
                let rel = abs / grad[k].abs().max(numeric.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > rtol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
