use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient vanishes are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<(Tape, Var, Var)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Oracle(format!(
            "function must be scalar-valued, got shape {:?}",
            tape.shape(out)
        )));
    }
    if !tape.value(out).is_finite() {
        return Err(Error::Oracle("function value is not finite".into()));
    }
    Ok((tape, xv, out))
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// with `(f(x+h) − f(x−h)) / 2h` per coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::param("h", format!("must be positive, got {h}")));
    }
    let (tape, xv, out) = evaluate(&f, x)?;
    let analytic = tape.backward(out)?.wrt(xv).into_data();
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (t, _, o) = evaluate(&f, &probe)?;
        let plus = t.value(o).item();
        probe.data_mut()[i] = orig - h;
        let (t, _, o) = evaluate(&f, &probe)?;
        let minus = t.value(o).item();
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
    })
}
