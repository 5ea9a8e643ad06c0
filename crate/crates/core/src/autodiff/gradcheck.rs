//! Central finite-difference checks against tape gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::Dimension("grad_check needs a scalar-valued function".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric("function is not finite at the probe point".into()));
    }
    Ok(v)
}

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn numeric_gradient<F>(f: &F, point: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for k in 0..point.numel() {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + FD_STEP;
        let up = eval(f, &probe)?;
        probe.data_mut()[k] = x0 - FD_STEP;
        let down = eval(f, &probe)?;
        probe.data_mut()[k] = x0;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Tape gradient of `f` at `point`.
pub fn tape_gradient<F>(f: &F, point: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_finite() {
        return Err(Error::Numeric("function is not finite at the probe point".into()));
    }
    Ok(tape.backward(y)?.tensor(x).into_data())
}

/// Largest relative disagreement between tape and finite-difference gradients.
///
/// Each entry is compared relative to the larger of its two estimates, floored
/// at 1e-3 of the largest gradient entry so that near-zero components are
/// judged on an absolute scale.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = tape_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point)?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}
