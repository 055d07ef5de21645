//! Central finite-difference gradient checking in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Largest relative error over compared elements.
    pub max_rel_err: f64,
    /// Number of elements compared (those with `|analytic| > 1e-8`).
    pub compared: usize,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.compared > 0 && self.max_rel_err < tol
    }
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Skip elements whose analytic gradient magnitude is at or below this.
    pub min_magnitude: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            min_magnitude: 1e-8,
            max_elements: None,
        }
    }
}

/// Compares tape gradients of the scalar produced by `f` against central
/// differences `(f(x + h) - f(x - h)) / 2h`, element by element.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input tracks gradients").data().to_vec();
        let n = analytic.len();
        let stride = match opts.max_elements {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[j];
            if a.abs() <= opts.min_magnitude {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.compared += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
