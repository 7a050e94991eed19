//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)` for a scalar perturbation.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let plus = f(eps)?;
    let minus = f(-eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of a scalar function with central differences
/// over every coordinate of `x`; returns the worst relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`grad_check`].
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(vars[which]).unwrap_or(&zeros);
        for coord in 0..input.numel() {
            let numeric = central_difference(
                |delta| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, src)| {
                            let mut src = src.clone();
                            if i == which {
                                src.data_mut()[coord] += delta;
                            }
                            t.constant(src)
                        })
                        .collect();
                    let out = f(&mut t, &vs)?;
                    Ok(t.value(out).data()[0])
                },
                eps,
            )?;
            let err = relative_error(analytic[coord], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, coord);
            }
        }
    }
    Ok(report)
}
