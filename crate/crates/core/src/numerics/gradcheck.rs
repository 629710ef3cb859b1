//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], fault: Option<&str>) -> Result<(f64, Tape<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(name) = fault {
        tape.inject_fault(name);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::dim("grad_check", "function must return a scalar"));
    }
    let value = tape.value(out).data()[0];
    Ok((value, tape, out, vars))
}

/// Compares the tape gradient of scalar `f` against central differences on
/// every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, inputs, eps, None)
}

/// [`grad_check`] with a deliberately corrupted backward for ops named `fault`.
pub fn grad_check_with_fault<F>(f: F, inputs: &[Tensor<f64>], eps: f64, fault: Option<&str>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, tape, out, vars) = evaluate(&f, inputs, fault)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.numel())).collect();
    drop(tape);

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coordinates: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let plus = evaluate(&f, &work, None).map(|r| r.0);
            work[i].data_mut()[j] = x0 - eps;
            let minus = evaluate(&f, &work, None).map(|r| r.0);
            work[i].data_mut()[j] = x0;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::CheckFailure { input: i, coordinate: j, detail: e.to_string() })
                }
                _ => {
                    return Err(Error::CheckFailure {
                        input: i,
                        coordinate: j,
                        detail: "non-finite function value".into(),
                    })
                }
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
