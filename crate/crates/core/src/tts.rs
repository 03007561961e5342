//! Latent-space test-time scaling: generate `n` candidates, score each with
//! a verifier, keep the best `k`. Nothing here decodes latents to pixels.

use serde::{Deserialize, Serialize};

use crate::conditioning::Generator;
use crate::datagen::MixtureSpec;
use crate::error::{Error, Result};
use crate::flow::euler_sample;
use crate::latent::{LatentBatch, LatentShape};
use crate::nn::{Init, Initializer, Linear};
use crate::report::ExperimentReport;
use crate::rng::{derive_seed, Rng};
use crate::schedule::ShiftedSchedule;
use crate::tensor::optim::{AdamWConfig, OptimizerState};
use crate::tensor::params::Bound;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub index: usize,
    pub score: f64,
    pub verifier: String,
}

/// Scores one flattened `N × d` latent for a condition; higher is better.
pub trait Verifier {
    fn name(&self) -> &str;
    fn score(&self, latent: &[f64], cond: usize) -> Result<f64>;
}

/// Scores by the true log-density of the condition's best-matching
/// mixture component (no mixture weight), so a latent sitting on a
/// component mean of an identity-covariance component scores
/// `−(N·d/2)·log 2π`.
pub struct OracleVerifier<'a> {
    pub spec: &'a MixtureSpec,
}

impl Verifier for OracleVerifier<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, latent: &[f64], cond: usize) -> Result<f64> {
        self.spec.component_log_density(cond, latent)
    }
}

/// Small classifier: per-token `d → hidden` with GELU, mean-pooled over
/// tokens, then `hidden → classes`. Classes are the conditions, optionally
/// followed by one reject class for latents that are not clean samples.
#[derive(Clone, Debug)]
pub struct Probe {
    pub params: ParamStore,
    fc1: Linear,
    fc2: Linear,
    latent: LatentShape,
    num_conditions: usize,
    classes: usize,
    trained: bool,
}

impl Probe {
    pub fn new(latent: LatentShape, hidden: usize, num_conditions: usize, reject: bool, seed: u64) -> Result<Self> {
        if hidden == 0 || num_conditions == 0 {
            return Err(Error::config("probe.hidden", "probe sizes must be positive"));
        }
        let classes = num_conditions + usize::from(reject);
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let fc1 = Linear::register(&mut params, &mut init, "probe/fc1", latent.channels, hidden, Init::FanIn);
        let fc2 = Linear::register(&mut params, &mut init, "probe/fc2", hidden, classes, Init::FanIn);
        Ok(Probe {
            params,
            fc1,
            fc2,
            latent,
            num_conditions,
            classes,
            trained: false,
        })
    }

    /// A probe whose output is uniform over conditions for every input.
    pub fn uniform(latent: LatentShape, hidden: usize, num_conditions: usize) -> Result<Self> {
        let mut p = Probe::new(latent, hidden, num_conditions, false, 0)?;
        p.params.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        p.trained = true;
        Ok(p)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn log_probs<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.gelu().mean_axis(1)?;
        Ok(self.fc2.forward(p, &h)?.log_softmax())
    }

    /// `[B, conditions]` log-probabilities.
    pub fn predict(&self, batch: &LatentBatch) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(batch.latents.shape(), batch.latents.data().to_vec())?;
        let lp = self.log_probs(&p, &x)?.value();
        Ok(lp.chunks(self.classes).map(<[f64]>::to_vec).collect())
    }

    pub fn accuracy(&self, batch: &LatentBatch) -> Result<f64> {
        let lp = self.predict(batch)?;
        let hits = lp
            .iter()
            .zip(&batch.conditions)
            .filter(|(row, &c)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                best == c
            })
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Full-batch AdamW on cross-entropy. Returns the final loss.
    pub fn train(&mut self, batch: &LatentBatch, steps: usize, lr: f64) -> Result<f64> {
        if batch.shape() != self.latent {
            return Err(Error::Dimension(format!(
                "probe built for {:?}, data is {:?}",
                self.latent,
                batch.shape()
            )));
        }
        let mut opt = OptimizerState::new(
            AdamWConfig {
                lr,
                ..AdamWConfig::default()
            },
            &self.params,
        );
        let mut last = f64::NAN;
        for _ in 0..steps {
            let tape = Tape::new();
            let p = self.params.bind(&tape);
            let x = tape.constant(batch.latents.shape(), batch.latents.data().to_vec())?;
            let loss = self.log_probs(&p, &x)?.pick_per_row(&batch.conditions)?.mean().scale(-1.0);
            last = loss.item();
            let grads = tape.backward(loss)?;
            self.params.absorb(&grads, &p);
            opt.step(&mut self.params, lr);
        }
        self.trained = true;
        Ok(last)
    }
}

/// Scores by the log-probability a trained probe assigns to the queried
/// condition.
pub struct ConfidenceVerifier<'a> {
    pub probe: &'a Probe,
}

impl Verifier for ConfidenceVerifier<'_> {
    fn name(&self) -> &str {
        "confidence"
    }

    fn score(&self, latent: &[f64], cond: usize) -> Result<f64> {
        if !self.probe.trained {
            return Err(Error::Contract("confidence verifier needs a trained probe".into()));
        }
        if cond >= self.probe.num_conditions {
            return Err(Error::Argument(format!("condition {cond} out of range")));
        }
        let batch = LatentBatch::from_rows(&[latent.to_vec()], self.probe.latent, vec![cond])?;
        Ok(self.probe.predict(&batch)?[0][cond])
    }
}

/// Indices of the `k` highest scores, best first; ties go to the lower
/// index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot select best {k} of {n}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN verifier score".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Vec<VerifierScore>,
    pub latents: Vec<Vec<f64>>,
}

/// Scores every candidate with `verifier` and keeps the best `k`.
pub fn best_k_of_n(candidates: &LatentBatch, cond: usize, verifier: &dyn Verifier, k: usize) -> Result<Selection> {
    let scores: Vec<f64> = (0..candidates.len())
        .map(|i| verifier.score(candidates.sample(i), cond))
        .collect::<Result<_>>()?;
    let indices = select_top_k(&scores, k)?;
    Ok(Selection {
        scores: indices
            .iter()
            .map(|&i| VerifierScore {
                index: i,
                score: scores[i],
                verifier: verifier.name().to_string(),
            })
            .collect(),
        latents: indices.iter().map(|&i| candidates.sample(i).to_vec()).collect(),
        indices,
    })
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    (wins..=n)
        .map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsConfig {
    pub k: usize,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub sampler_steps: usize,
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("tts.n", "grid must be nonempty and strictly ascending"));
        }
        if self.k == 0 || self.n_grid[0] < self.k {
            return Err(Error::config("tts.k", "every n must be at least k ≥ 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("tts.trials", "must be positive"));
        }
        Ok(())
    }
}

/// For each trial: sample `max(n_grid)` candidates of condition
/// `trial mod conditions` (per-candidate noise seeds, so the first `n`
/// candidates are exactly the size-`n` pool), score them once, and for each
/// `n` record the mean verifier score and mean oracle score of the best `k`
/// among the first `n`. Metric names: `selected_score/n=<n>` and
/// `oracle_quality/n=<n>`, step = trial.
#[allow(clippy::too_many_arguments)]
pub fn tts_experiment(
    generator: &Generator,
    sched: &ShiftedSchedule,
    spec: &MixtureSpec,
    verifier: &dyn Verifier,
    cfg: &TtsConfig,
    seed: u64,
    config_hash: &str,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let oracle = OracleVerifier { spec };
    let n_max = *cfg.n_grid.last().expect("validated");
    let mut report = ExperimentReport::new(format!("tts/{}", verifier.name()), config_hash, seed);
    report.timed("tts", |report| -> Result<()> {
        for trial in 0..cfg.trials {
            let cond = trial % spec.num_conditions();
            let pool = euler_sample(
                generator,
                sched,
                cfg.sampler_steps,
                generator.latent(),
                derive_seed(seed, trial as u64),
                &vec![cond; n_max],
            )?;
            let scores: Vec<f64> = (0..n_max)
                .map(|i| verifier.score(pool.sample(i), cond))
                .collect::<Result<_>>()?;
            let quality: Vec<f64> = (0..n_max)
                .map(|i| oracle.score(pool.sample(i), cond))
                .collect::<Result<_>>()?;
            for &n in &cfg.n_grid {
                let chosen = select_top_k(&scores[..n], cfg.k)?;
                let mean = |v: &[f64]| chosen.iter().map(|&i| v[i]).sum::<f64>() / cfg.k as f64;
                report.log(trial as u64, 0, format!("selected_score/n={n}"), mean(&scores));
                report.log(trial as u64, 0, format!("oracle_quality/n={n}"), mean(&quality));
            }
        }
        Ok(())
    })?;
    Ok(report)
}

/// Largest interpolation time used for reject-class examples.
pub const REJECT_MAX_T: f64 = 1.0;

/// Trains a probe on fresh ground-truth latents of every condition, plus as
/// many reject-class examples: real latents partially re-noised to
/// `(1 − t)·x + t·ε` with `t ~ U(0, REJECT_MAX_T)`.
pub fn train_probe(spec: &MixtureSpec, per_condition: usize, hidden: usize, steps: usize, seed: u64) -> Result<Probe> {
    let k = spec.num_conditions();
    let real = spec.sample_all(per_condition, derive_seed(seed, 0))?;
    let mut rng = Rng::new(derive_seed(seed, 2));
    let mut rows = real.rows();
    let mut labels = real.conditions.clone();
    for row in real.rows() {
        let t = REJECT_MAX_T * rng.uniform();
        rows.push(row.iter().map(|x| (1.0 - t) * x + t * rng.normal()).collect());
        labels.push(k);
    }
    let data = LatentBatch::from_rows(&rows, spec.shape, labels)?;
    let mut probe = Probe::new(spec.shape, hidden, k, true, derive_seed(seed, 1))?;
    probe.train(&data, steps, 1e-2)?;
    Ok(probe)
}

/// Shuffled copy of a batch (for order-invariance checks).
pub fn shuffled(batch: &LatentBatch, seed: u64) -> Result<(LatentBatch, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    Rng::new(seed).shuffle(&mut perm);
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| batch.sample(i).to_vec()).collect();
    let conds = perm.iter().map(|&i| batch.conditions[i]).collect();
    Ok((LatentBatch::from_rows(&rows, batch.shape(), conds)?, perm))
}
