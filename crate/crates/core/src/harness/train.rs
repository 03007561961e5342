//! Flow-matching training of the conditioned generator.

use crate::conditioning::Generator;
use crate::datagen::{sliced_wasserstein, MixtureSpec};
use crate::error::{Error, Result};
use crate::flow::{bind, euler_sample, fm_loss, interpolate};
use crate::latent::{LatentBatch, LatentShape};
use crate::report::ExperimentReport;
use crate::rng::{derive_seed, Rng};
use crate::schedule::ShiftedSchedule;
use crate::tensor::optim::{clip_grad_norm, OptimizerState};
use crate::tensor::{Tape, Tensor};

use super::config::ExperimentConfig;

pub const LOG_INTERVAL: u64 = 10;

/// Where training batches come from.
pub trait DataSource {
    fn shape(&self) -> LatentShape;
    fn num_conditions(&self) -> usize;
    fn batch(&self, size: usize, rng: &mut Rng) -> Result<LatentBatch>;
}

/// Fresh draws from the mixture every step, conditions uniform.
impl DataSource for MixtureSpec {
    fn shape(&self) -> LatentShape {
        self.shape
    }

    fn num_conditions(&self) -> usize {
        MixtureSpec::num_conditions(self)
    }

    fn batch(&self, size: usize, rng: &mut Rng) -> Result<LatentBatch> {
        let mut rows = Vec::with_capacity(size);
        let mut conds = Vec::with_capacity(size);
        for _ in 0..size {
            let c = rng.below(MixtureSpec::num_conditions(self));
            rows.push(self.sample(c, 1, rng.next_u64())?.sample(0).to_vec());
            conds.push(c);
        }
        LatentBatch::from_rows(&rows, self.shape, conds)
    }
}

/// Uniform draws with replacement from a fixed set.
impl DataSource for LatentBatch {
    fn shape(&self) -> LatentShape {
        LatentBatch::shape(self)
    }

    fn num_conditions(&self) -> usize {
        self.conditions.iter().max().map_or(0, |m| m + 1)
    }

    fn batch(&self, size: usize, rng: &mut Rng) -> Result<LatentBatch> {
        if self.is_empty() {
            return Err(Error::Argument("empty training set".into()));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.below(self.len())).collect();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.sample(i).to_vec()).collect();
        LatentBatch::from_rows(&rows, LatentBatch::shape(self), idx.iter().map(|&i| self.conditions[i]).collect())
    }
}

/// Metrics computed on the current model at eval points.
pub trait Evaluator {
    fn evaluate(&mut self, generator: &Generator, sched: &ShiftedSchedule) -> Result<Vec<(String, f64)>>;
}

/// Mean over conditions of the sliced Wasserstein distance between sampled
/// and ground-truth latents, logged as `sw`.
pub struct MixtureEval<'a> {
    pub spec: &'a MixtureSpec,
    pub samples: usize,
    pub projections: usize,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl<'a> MixtureEval<'a> {
    pub fn new(spec: &'a MixtureSpec, cfg: &ExperimentConfig) -> Self {
        MixtureEval {
            spec,
            samples: cfg.eval_samples,
            projections: cfg.eval_projections,
            sampler_steps: cfg.sampler_steps,
            seed: cfg.eval_seed,
        }
    }

    pub fn sliced_wasserstein(&self, generator: &Generator, sched: &ShiftedSchedule) -> Result<f64> {
        let k = self.spec.num_conditions();
        let mut total = 0.0;
        for c in 0..k {
            let generated = euler_sample(
                generator,
                sched,
                self.sampler_steps,
                self.spec.shape,
                derive_seed(self.seed, c as u64),
                &vec![c; self.samples],
            )?;
            let truth = self.spec.sample(c, self.samples, derive_seed(self.seed, 1 << 32 | c as u64))?;
            total += sliced_wasserstein(&generated.rows(), &truth.rows(), self.projections, self.seed)?;
        }
        Ok(total / k as f64)
    }
}

impl Evaluator for MixtureEval<'_> {
    fn evaluate(&mut self, generator: &Generator, sched: &ShiftedSchedule) -> Result<Vec<(String, f64)>> {
        Ok(vec![("sw".into(), self.sliced_wasserstein(generator, sched)?)])
    }
}

/// Held-out flow-matching loss averaged over `repeats` fixed draws of
/// timesteps and noise, logged as `val_loss`.
pub struct ValidationEval {
    pub data: LatentBatch,
    pub repeats: usize,
    pub seed: u64,
}

impl ValidationEval {
    pub fn loss(&self, generator: &Generator, sched: &ShiftedSchedule) -> Result<f64> {
        let mut total = 0.0;
        for r in 0..self.repeats {
            total += validation_loss(generator, sched, &self.data, derive_seed(self.seed, r as u64))?;
        }
        Ok(total / self.repeats as f64)
    }
}

impl Evaluator for ValidationEval {
    fn evaluate(&mut self, generator: &Generator, sched: &ShiftedSchedule) -> Result<Vec<(String, f64)>> {
        Ok(vec![("val_loss".into(), self.loss(generator, sched)?)])
    }
}

/// Flow-matching loss on a fixed batch with per-sample timesteps and noise
/// fixed by `seed`.
pub fn validation_loss(generator: &Generator, sched: &ShiftedSchedule, data: &LatentBatch, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let t: Vec<f64> = (0..data.len()).map(|_| sched.sample_train_timestep(&mut rng)).collect();
    let eps = Tensor::new(data.latents.shape(), rng.normals(data.latents.numel()))?;
    let sample = interpolate(&data.latents, &eps, &t)?;
    let tape = Tape::new();
    let p = bind(generator, &tape);
    Ok(fm_loss(generator, &p, &sample, &data.conditions)?.item())
}

/// Runs flow-matching training for `cfg.steps` AdamW steps. Logs
/// `train_loss` every [`LOG_INTERVAL`] steps and the evaluator's metrics at
/// step 0, every `eval_interval` steps, and after the last step. Returns
/// the EMA weights (the raw weights when `optim.ema = 0`).
pub fn train_dit(
    cfg: &ExperimentConfig,
    data: &dyn DataSource,
    eval: &mut dyn Evaluator,
    config_hash: &str,
) -> Result<(Generator, ExperimentReport)> {
    cfg.validate()?;
    if data.shape() != cfg.latent {
        return Err(Error::config(
            "latent.tokens",
            format!("config latent {:?} but data is {:?}", cfg.latent, data.shape()),
        ));
    }
    if data.num_conditions() > cfg.data_conditions {
        return Err(Error::config("data.conditions", "data has more conditions than the conditioner"));
    }
    let sched = cfg.schedule()?;
    let mut generator = Generator::build(&cfg.generator(), derive_seed(cfg.seed, 1))?;
    let mut ema = generator.clone();
    let mut opt = OptimizerState::new(cfg.optimizer(), &generator.params);
    let lrs = cfg.lr_schedule();
    let mut rng = Rng::new(derive_seed(cfg.seed, 2));
    let mut report = ExperimentReport::new("train_dit", config_hash, cfg.seed);

    let mut log_eval = |report: &mut ExperimentReport, generator: &Generator, step: u64| -> Result<()> {
        for (name, value) in eval.evaluate(generator, &sched)? {
            report.log(step, 0, name, value);
        }
        Ok(())
    };
    report.timed("eval", |r| log_eval(r, &ema, 0))?;
    report.timed("train", |report| -> Result<()> {
        for step in 0..cfg.steps {
            let batch = data.batch(cfg.batch, &mut rng)?;
            let t: Vec<f64> = (0..cfg.batch).map(|_| sched.sample_train_timestep(&mut rng)).collect();
            let eps = Tensor::new(batch.latents.shape(), rng.normals(batch.latents.numel()))?;
            let sample = interpolate(&batch.latents, &eps, &t)?;
            let tape = Tape::new();
            let p = bind(&generator, &tape);
            let loss = fm_loss(&generator, &p, &sample, &batch.conditions)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Domain(format!("non-finite loss at step {step}")));
            }
            if step % LOG_INTERVAL == 0 {
                report.log(step, 0, "train_loss", value);
            }
            let grads = tape.backward(loss)?;
            generator.params.absorb(&grads, &p);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut generator.params, cfg.grad_clip);
            }
            opt.step(&mut generator.params, lrs.lr(step));
            update_ema(&mut ema, &generator, cfg.ema.min((1 + step) as f64 / (10 + step) as f64));
            let done = step + 1;
            if done % cfg.eval_interval == 0 || done == cfg.steps {
                log_eval(report, &ema, done)?;
            }
        }
        Ok(())
    })?;
    Ok((ema, report))
}

/// `ema ← decay·ema + (1 − decay)·current`; decay 0 copies.
fn update_ema(ema: &mut Generator, current: &Generator, decay: f64) {
    for (e, (_, c)) in ema.params.tensors_mut().iter_mut().zip(current.params.iter()) {
        e.data_mut()
            .iter_mut()
            .zip(c.data())
            .for_each(|(e, c)| *e = decay * *e + (1.0 - decay) * c);
    }
}
