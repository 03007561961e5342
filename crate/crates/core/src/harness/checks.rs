//! The finite-difference gradient suite behind the `gradcheck` subcommand.

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, interpolate, ScalarLinearField, VelocityField};
use crate::gradcheck::{check, check_model, check_model_detailed, CheckRecord};
use crate::latent::LatentShape;
use crate::rae::{gram_loss, recon_loss, Encoder, EncoderConfig, LossWeights};
use crate::report::ExperimentReport;
use crate::rng::Rng;
use crate::tensor::{seeded_normal, Tape, Tensor, Var};

pub const OPS_TOLERANCE: f64 = 1e-5;
pub const DENOISER_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Denoiser,
    Losses,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Denoiser, Scope::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Denoiser => "denoiser",
            Scope::Losses => "losses",
        }
    }

    pub fn parse(name: &str) -> Result<Scope> {
        Scope::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Argument(format!("unknown gradcheck scope `{name}`")))
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Ops => OPS_TOLERANCE,
            Scope::Denoiser => DENOISER_TOLERANCE,
            Scope::Losses => LOSS_TOLERANCE,
        }
    }
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    seeded_normal(shape, seed)
}

/// Random weights for a scalar readout so every output coordinate matters.
fn readout<'t>(tape: &'t Tape, v: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.leaf(&normal(&v.shape(), seed));
    Ok(v.mul(&w)?.sum())
}

fn ops() -> Result<Vec<CheckRecord>> {
    let x = normal(&[2, 3, 4], 1);
    let y = normal(&[2, 3, 4], 2);
    let positive = Tensor::new(&[2, 3, 4], x.data().iter().map(|v| v.abs() + 0.5).collect())?;
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push(CheckRecord::new(name, err, OPS_TOLERANCE));
    macro_rules! op {
        ($name:expr, $inputs:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let err = check(&$inputs, |$tape, $v| $body)?;
            push($name, err);
        }};
    }
    op!("add", vec![x.clone(), y.clone()], |t, v| readout(t, &v[0].add(&v[1])?, 10));
    op!("add_broadcast", vec![x.clone(), normal(&[4], 3)], |t, v| readout(t, &v[0].add(&v[1])?, 11));
    op!("sub", vec![x.clone(), normal(&[2, 1, 4], 4)], |t, v| readout(t, &v[0].sub(&v[1])?, 12));
    op!("mul", vec![x.clone(), y.clone()], |t, v| readout(t, &v[0].mul(&v[1])?, 13));
    op!("scale_add_scalar", vec![x.clone()], |t, v| readout(t, &v[0].scale(-2.5).add_scalar(1.0), 14));
    op!("gelu", vec![x.clone()], |t, v| readout(t, &v[0].gelu(), 15));
    op!("tanh", vec![x.clone()], |t, v| readout(t, &v[0].tanh(), 16));
    op!("silu", vec![x.clone()], |t, v| readout(t, &v[0].silu(), 17));
    op!("abs", vec![x.clone()], |t, v| readout(t, &v[0].abs(), 18));
    op!("exp", vec![x.clone()], |t, v| readout(t, &v[0].exp(), 19));
    op!("ln", vec![positive], |t, v| readout(t, &v[0].ln(), 20));
    op!("square", vec![x.clone()], |t, v| readout(t, &v[0].square(), 21));
    op!("matmul", vec![x.clone(), normal(&[4, 5], 5)], |t, v| readout(t, &v[0].matmul(&v[1])?, 22));
    op!("linear", vec![x.clone(), normal(&[4, 5], 6), normal(&[5], 7)], |t, v| {
        readout(t, &v[0].linear(&v[1], Some(&v[2]))?, 23)
    });
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = if ta { normal(&[2, 4, 3], 8) } else { normal(&[2, 3, 4], 8) };
        let b = if tb { normal(&[2, 5, 4], 9) } else { normal(&[2, 4, 5], 9) };
        let err = check(&[a, b], |t, v| readout(t, &v[0].bmm(&v[1], ta, tb)?, 24))?;
        push(&format!("bmm_{}{}", if ta { "t" } else { "n" }, if tb { "t" } else { "n" }), err);
    }
    op!("permute", vec![x.clone()], |t, v| readout(t, &v[0].permute(&[2, 0, 1])?, 25));
    op!("reshape", vec![x.clone()], |t, v| readout(t, &v[0].reshape(&[6, 4])?, 26));
    op!("slice_last", vec![x.clone()], |t, v| readout(t, &v[0].slice_last(1, 2)?, 27));
    op!("sum", vec![x.clone()], |_t, v| Ok(v[0].square().sum()));
    op!("mean", vec![x.clone()], |_t, v| Ok(v[0].square().mean()));
    for axis in 0..3 {
        let err = check(&[x.clone()], |t, v| readout(t, &v[0].sum_axis(axis)?, 28))?;
        push(&format!("sum_axis_{axis}"), err);
        let err = check(&[x.clone()], |t, v| readout(t, &v[0].mean_axis(axis)?, 29))?;
        push(&format!("mean_axis_{axis}"), err);
        let err = check(&[x.clone()], |t, v| readout(t, &v[0].softmax(axis)?, 30))?;
        push(&format!("softmax_{axis}"), err);
    }
    op!("log_softmax", vec![x.clone()], |t, v| readout(t, &v[0].log_softmax(), 31));
    op!("layer_norm", vec![x.clone(), normal(&[4], 32), normal(&[4], 33)], |t, v| {
        readout(t, &v[0].layer_norm(Some(&v[1]), Some(&v[2]), 1e-6)?, 34)
    });
    op!("layer_norm_plain", vec![x.clone()], |t, v| readout(t, &v[0].layer_norm(None, None, 1e-6)?, 35));
    op!("gather_rows", vec![normal(&[5, 3], 36)], |t, v| readout(t, &v[0].gather_rows(&[4, 0, 4, 2])?, 37));
    op!("pick_per_row", vec![normal(&[4, 3], 38)], |t, v| readout(t, &v[0].pick_per_row(&[2, 0, 1, 1])?, 39));
    Ok(out)
}

/// Width-16 depth-1 denoisers, with and without the wide head, with all
/// zero-initialised layers perturbed so every path carries gradient.
fn denoiser() -> Result<Vec<CheckRecord>> {
    let latent = LatentShape::new(3, 4)?;
    let base = DenoiserConfig {
        hidden: 16,
        depth: 1,
        heads: 2,
        latent,
        ddt_head_width: None,
        ddt_head_depth: 1,
        cond_dim: 4,
        freq_dim: 8,
    };
    let x = normal(&[2, 3, 4], 1);
    let cond = normal(&[2, 4], 2);
    let t = [0.3, 0.8];
    let mut out = Vec::new();
    for (tag, cfg) in [("plain", base.clone()), ("head", base.with_head(24))] {
        let mut model = Denoiser::build(&cfg, 5)?;
        for (i, p) in model.params.tensors_mut().iter_mut().enumerate() {
            let noise = normal(p.shape(), 1000 + i as u64);
            p.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += 0.3 * n);
        }
        let per = check_model_detailed(&model.params, |tape, p| {
            let xv = tape.leaf(&x);
            let cv = tape.leaf(&cond);
            readout(tape, &model.forward(p, &xv, &t, &cv)?, 3)
        })?;
        for (name, err) in per {
            out.push(CheckRecord::new(format!("{tag}/{name}"), err, DENOISER_TOLERANCE));
        }
        let err = check(&[x.clone(), cond.clone()], |tape, v| {
            let p = model.params.bind(tape);
            readout(tape, &model.forward(&p, &v[0], &t, &v[1])?, 3)
        })?;
        out.push(CheckRecord::new(format!("{tag}/inputs"), err, DENOISER_TOLERANCE));
    }
    Ok(out)
}

/// Images near mid-grey and a reconstruction offset from them by at least
/// 0.05 per pixel, so no ℓ1 term sits at its kink.
fn jittered_pair() -> Result<(Tensor, Tensor)> {
    let mut rng = Rng::new(7);
    let n = 2 * 32 * 32;
    let x: Vec<f64> = (0..n).map(|_| 0.5 + 0.1 * rng.normal()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            v + sign * (0.05 + 0.05 * rng.uniform())
        })
        .collect();
    Ok((Tensor::new(&[2, 1, 32, 32], x)?, Tensor::new(&[2, 1, 32, 32], y)?))
}

fn losses() -> Result<Vec<CheckRecord>> {
    let (x, y) = jittered_pair()?;
    let enc = Encoder::new(EncoderConfig {
        channels: 8,
        ..EncoderConfig::toy(1)
    })?;
    let mut out = Vec::new();
    let l1 = check(&[y.clone()], |tape, v| Ok(v[0].sub(&tape.leaf(&x))?.abs().mean()))?;
    out.push(CheckRecord::new("l1", l1, LOSS_TOLERANCE));
    let weights = LossWeights {
        perceptual: 1.0,
        gram: 100.0,
        adversarial: 0.0,
    };
    let recon = check(&[y], |tape, v| Ok(recon_loss(&tape.leaf(&x), &v[0], &weights, &enc, None)?.0))?;
    out.push(CheckRecord::new("recon_loss", recon, LOSS_TOLERANCE));
    let gram = check(&[normal(&[2, 5, 3], 2), normal(&[2, 5, 3], 3)], |_, v| gram_loss(&v[0], &v[1]))?;
    out.push(CheckRecord::new("gram_loss", gram, LOSS_TOLERANCE));
    let logits = normal(&[4, 5], 4);
    let ce = check(&[logits], |_, v| Ok(v[0].log_softmax().pick_per_row(&[1, 4, 0, 2])?.mean().scale(-1.0)))?;
    out.push(CheckRecord::new("cross_entropy", ce, LOSS_TOLERANCE));
    let sample = interpolate(&normal(&[3, 2, 2], 5), &normal(&[3, 2, 2], 6), &[0.2, 0.5, 0.9])?;
    let field = ScalarLinearField::new(0.7);
    let params = field.params().expect("scalar field has parameters");
    let fm = check_model(params, |_, p| fm_loss(&field, p, &sample, &[0, 0, 0]))?;
    out.push(CheckRecord::new("fm_loss", fm, LOSS_TOLERANCE));
    Ok(out)
}

pub fn run_gradcheck(scope: Scope) -> Result<Vec<CheckRecord>> {
    match scope {
        Scope::Ops => ops(),
        Scope::Denoiser => denoiser(),
        Scope::Losses => losses(),
    }
}

/// One `<scope>/<name>` record per check, plus a summary line per failure.
pub fn gradcheck_report(scope: Scope, records: &[CheckRecord]) -> ExperimentReport {
    let mut report = ExperimentReport::new(format!("gradcheck_{}", scope.name()), "", 0);
    for r in records {
        report.log(0, 0, format!("{}/{}", scope.name(), r.name), r.max_rel_err);
    }
    let failed: Vec<&CheckRecord> = records.iter().filter(|r| !r.passed).collect();
    let worst = records.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    report.note(format!(
        "{}: {} checks, worst relative error {worst:.3e}, tolerance {:.0e}, {}",
        scope.name(),
        records.len(),
        scope.tolerance(),
        if failed.is_empty() { "pass" } else { "FAIL" }
    ));
    for r in failed {
        report.note(format!("  failed {}: {:.3e}", r.name, r.max_rel_err));
    }
    report
}
