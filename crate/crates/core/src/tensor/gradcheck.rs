use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively, so that near-zero entries do not blow up the ratio.
const REL_ERR_FLOOR: f64 = 1e-2;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per-coordinate relative error.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tol: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let y = f(xv)?;
    let v = y.value();
    if v.rank() != 0 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got dims {:?}",
            v.dims()
        )));
    }
    let out = v.item();
    if !out.is_finite() {
        return Err(Error::Numeric("function evaluated to a non-finite value".into()));
    }
    Ok(out)
}

/// Central difference of scalar `f` along coordinate `index` with step `h`.
pub fn central_difference<F>(f: F, x: &Tensor<f64>, index: usize, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if index >= x.numel() {
        return Err(Error::Contract(format!("coordinate {index} outside {} elements", x.numel())));
    }
    let mut probe = x.clone();
    let x0 = x.data()[index];
    probe.data_mut()[index] = x0 + h;
    let up = eval_scalar(&f, &probe)?;
    probe.data_mut()[index] = x0 - h;
    let down = eval_scalar(&f, &probe)?;
    Ok((up - down) / (2.0 * h))
}

/// Compares the tape gradient of scalar `f` at `x` with the central
/// difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone())?;
        f(xv)?.backward()?;
        xv.grad().unwrap_or_else(|| Tensor::zeros(x.dims()))
    };

    let mut probe = x.clone();
    let mut rel_errors = Vec::with_capacity(x.numel());
    let mut worst = (0, f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = x0;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if err > worst.1 {
            worst = (i, err, a, numeric);
        }
        rel_errors.push(err);
    }
    let max_rel_error = worst.1.max(0.0);
    Ok(GradCheckReport {
        rel_errors,
        max_rel_error,
        worst_index: worst.0,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
        tol,
        passed: max_rel_error < tol,
    })
}
