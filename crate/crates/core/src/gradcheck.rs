//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it is
//! independent of every backward rule it checks.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v[0])
}

/// Compare the tape's gradients of scalar `f` with central differences of
/// step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[ii].numel()];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = inputs[ii].data()[e];
            work[ii].data_mut()[e] = orig + h;
            let fp = eval(&work, &f)?;
            work[ii].data_mut()[e] = orig - h;
            let fm = eval(&work, &f)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ii, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Check a tensor-valued `f` through the scalar projection `sum(f(x) ⊙ r)`
/// with a seeded random `r`, which exercises every output component.
pub fn check_projected<F>(inputs: &[Tensor], h: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check(inputs, h, |tape, vars| {
        let y = f(tape, vars)?;
        let shape = tape.shape(y).to_vec();
        let mut r = rng::seeded(seed);
        let proj: Vec<f64> = (0..tape.value(y).len())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let p = tape.constant(shape, proj)?;
        let prod = tape.mul(y, p)?;
        Ok(tape.sum(prod))
    })
}
