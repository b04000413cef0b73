//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of the
//! backward rules it is checking.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, rel_tol: 1e-4, abs_tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central differences for every
/// element of every input. `f` receives the inputs registered as parameters, in order.
pub fn check<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient").data().to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let n = (plus - minus) / (2.0 * cfg.step);

            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > cfg.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > cfg.rel_tol {
                    report.failures.push(Mismatch { input: i, element: e, analytic: a, numeric: n });
                }
            }
        }
    }
    Ok(report)
}
