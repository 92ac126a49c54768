//! Central finite-difference gradient oracle.
//!
//! The oracle only evaluates the forward function; it never reads the
//! analytic gradient path it is compared against.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, floor: 1e-6 }
    }
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    f(&tape, &vars).item()
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss).expect("scalar loss");
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x0 = input.data()[k];
            work[i].data_mut()[k] = x0 + cfg.step;
            let fp = eval_scalar(&work, &f);
            work[i].data_mut()[k] = x0 - cfg.step;
            let fm = eval_scalar(&work, &f);
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[i].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (i, k);
            }
        }
    }
    report
}
