//! Central finite-difference checks of analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` between analytic and
/// numeric gradients (zero when both vanish).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step [`STEP`], for every input. Returns the worst
/// relative error over inputs.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ts.iter().map(|t| tape.leaf(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        CheckRecord {
            name: name.into(),
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }
}

/// Finite-difference check of every parameter tensor in `store` for the
/// scalar `f`. Returns the worst per-tensor relative error.
pub fn check_model<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    Ok(check_model_detailed(store, f)?
        .into_iter()
        .map(|(_, e)| e)
        .fold(0.0, f64::max))
}

/// Per-tensor relative errors, in store order.
pub fn check_model_detailed<F>(store: &ParamStore, f: F) -> Result<Vec<(String, f64)>>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = bound.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        Ok(f(&tape, &bound)?.item())
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let id = ParamId(i);
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        out.push((store.name(id).to_string(), relative_error(a, &numeric)));
    }
    Ok(out)
}
