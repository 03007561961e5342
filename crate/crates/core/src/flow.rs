//! Flow matching on linear interpolants and the deterministic Euler sampler.

use crate::error::{Error, Result};
use crate::latent::{LatentBatch, LatentShape};
use crate::rng::derive_seed;
use crate::schedule::ShiftedSchedule;
use crate::tensor::params::Bound;
use crate::tensor::{seeded_normal, ParamStore, Tape, Tensor, Var};

/// A velocity predictor `v̂(x_t, t, condition)` over `B × N × d` states.
pub trait VelocityField {
    /// Trainable parameters, if any. They are bound to the tape by the caller.
    fn params(&self) -> Option<&ParamStore> {
        None
    }

    fn velocity<'t>(
        &self,
        params: &Bound<'t>,
        x_t: &Var<'t>,
        t: &[f64],
        cond: &[usize],
    ) -> Result<Var<'t>>;
}

/// Binds `model`'s parameters (if any) to `tape`.
pub fn bind<'t>(model: &dyn VelocityField, tape: &'t Tape) -> Bound<'t> {
    model
        .params()
        .map(|p| p.bind(tape))
        .unwrap_or_else(|| Bound::on(tape))
}

/// `x_t = (1 − t)·x + t·ε` with target velocity `ε − x`.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

pub fn interpolate(x: &Tensor, eps: &Tensor, t: &[f64]) -> Result<FlowSample> {
    if x.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "data {:?} vs noise {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    if x.shape()[0] != t.len() {
        return Err(Error::Dimension(format!(
            "{} timesteps for batch of {}",
            t.len(),
            x.shape()[0]
        )));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("timestep {bad} outside [0, 1]")));
    }
    let per = x.numel() / t.len();
    let mut xt = vec![0.0; x.numel()];
    let mut v = vec![0.0; x.numel()];
    for (i, &ti) in t.iter().enumerate() {
        for j in i * per..(i + 1) * per {
            let (a, e) = (x.data()[j], eps.data()[j]);
            xt[j] = (1.0 - ti) * a + ti * e;
            v[j] = e - a;
        }
    }
    Ok(FlowSample {
        x: x.clone(),
        eps: eps.clone(),
        t: t.to_vec(),
        x_t: Tensor::new(x.shape(), xt)?,
        v_target: Tensor::new(x.shape(), v)?,
    })
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss<'t>(
    model: &dyn VelocityField,
    params: &Bound<'t>,
    sample: &FlowSample,
    cond: &[usize],
) -> Result<Var<'t>> {
    let tape = params.tape().ok_or_else(|| {
        Error::Contract("fm_loss needs parameters bound to a tape (use Bound::on)".into())
    })?;
    let x_t = tape.leaf(&sample.x_t);
    let target = tape.leaf(&sample.v_target);
    let pred = model.velocity(params, &x_t, &sample.t, cond)?;
    Ok(pred.sub(&target)?.square().mean())
}

/// Noise for sample `i` of a batch, seeded per sample so any split of the
/// batch reproduces the same draws.
pub fn sample_noise(seed: u64, index: usize, shape: LatentShape) -> Tensor {
    seeded_normal(&[1, shape.tokens, shape.channels], derive_seed(seed, index as u64))
}

/// Integrates `dx/dt = v̂(x, t)` from `t = 1` (pure noise) to `t = 0` over the
/// shifted grid with explicit Euler steps.
pub fn euler_sample(
    model: &dyn VelocityField,
    sched: &ShiftedSchedule,
    steps: usize,
    shape: LatentShape,
    seed: u64,
    cond: &[usize],
) -> Result<LatentBatch> {
    let b = cond.len();
    let mut x = Vec::with_capacity(b * shape.dim());
    for i in 0..b {
        x.extend_from_slice(sample_noise(seed, i, shape).data());
    }
    let x = Tensor::new(&[b, shape.tokens, shape.channels], x)?;
    integrate(model, sched, steps, x, cond)
}

/// Euler integration from a given initial state at `t = 1`.
pub fn integrate(
    model: &dyn VelocityField,
    sched: &ShiftedSchedule,
    steps: usize,
    init: Tensor,
    cond: &[usize],
) -> Result<LatentBatch> {
    let grid = sched.sampler_grid(steps)?;
    let b = cond.len();
    let mut x = init;
    for k in 0..steps {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let tape = Tape::new();
        let bound = bind(model, &tape);
        let xv = tape.leaf(&x);
        let v = model.velocity(&bound, &xv, &vec![t0; b], cond)?;
        let dt = t1 - t0;
        let vv = v.value();
        x.data_mut()
            .iter_mut()
            .zip(vv.iter())
            .for_each(|(xi, vi)| *xi += dt * vi);
    }
    LatentBatch::new(x, cond.to_vec())
}

/// `c(t)` with `E[ε − x | x_t] = c(t)·x_t` when `x ~ N(0, s²I)`.
pub fn gaussian_oracle_coefficient(t: f64, s: f64) -> f64 {
    let s2 = s * s;
    (t - (1.0 - t) * s2) / ((1.0 - t) * (1.0 - t) * s2 + t * t)
}

/// Exact velocity field for `N(0, s²I)` data.
pub fn gaussian_oracle_velocity(x_t: &Tensor, t: &[f64], s: f64) -> Result<Tensor> {
    if s <= 0.0 {
        return Err(Error::Argument(format!("data std must be positive, got {s}")));
    }
    let per = x_t.numel() / t.len();
    let mut out = x_t.data().to_vec();
    for (i, &ti) in t.iter().enumerate() {
        if !(0.0..=1.0).contains(&ti) {
            return Err(Error::Domain(format!("timestep {ti} outside [0, 1]")));
        }
        let c = gaussian_oracle_coefficient(ti, s);
        out[i * per..(i + 1) * per].iter_mut().for_each(|v| *v *= c);
    }
    Tensor::new(x_t.shape(), out)
}

/// The closed-form field as a [`VelocityField`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianOracle {
    pub std: f64,
}

impl VelocityField for GaussianOracle {
    fn velocity<'t>(
        &self,
        params: &Bound<'t>,
        x_t: &Var<'t>,
        t: &[f64],
        _cond: &[usize],
    ) -> Result<Var<'t>> {
        let _ = params;
        let v = gaussian_oracle_velocity(&x_t.to_tensor(), t, self.std)?;
        let shape = v.shape().to_vec();
        x_t.tape().constant(&shape, v.into_data())
    }
}

/// Always predicts zero velocity.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocity<'t>(
        &self,
        _params: &Bound<'t>,
        x_t: &Var<'t>,
        _t: &[f64],
        _cond: &[usize],
    ) -> Result<Var<'t>> {
        x_t.tape().constant(&x_t.shape(), vec![0.0; x_t.numel()])
    }
}

/// Per-sample scalar model `â(t)·x_t` with `â` read from a table of
/// coefficients; used to probe the optimum of the objective among
/// linear-in-`x_t` predictors.
pub struct ScalarLinearField {
    params: ParamStore,
}

impl ScalarLinearField {
    pub fn new(coefficient: f64) -> Self {
        let mut params = ParamStore::new();
        params.add("a", Tensor::scalar(coefficient));
        ScalarLinearField { params }
    }

    pub fn coefficient(&self) -> f64 {
        self.params.iter().next().unwrap().1.data()[0]
    }
}

impl VelocityField for ScalarLinearField {
    fn params(&self) -> Option<&ParamStore> {
        Some(&self.params)
    }

    fn velocity<'t>(
        &self,
        params: &Bound<'t>,
        x_t: &Var<'t>,
        _t: &[f64],
        _cond: &[usize],
    ) -> Result<Var<'t>> {
        x_t.mul(&params.vars()[0])
    }
}

/// Least-squares coefficient `argmin_a Σ (a·x_t − v)²` over a flow sample.
pub fn regress_scalar_coefficient(sample: &FlowSample) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, v) in sample.x_t.data().iter().zip(sample.v_target.data()) {
        num += x * v;
        den += x * x;
    }
    num / den
}
