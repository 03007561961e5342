//! Standalone evaluation of generator and decoder checkpoints on freshly
//! drawn data.

use crate::conditioning::Generator;
use crate::datagen::{sliced_wasserstein, Domain, MixtureSpec};
use crate::error::{Error, Result};
use crate::flow::euler_sample;
use crate::rae::{frechet_distance, image_features, mean_abs_diff, validation_images, LatentCodec, Rae};
use crate::report::ExperimentReport;
use crate::rng::derive_seed;
use crate::schedule::ShiftedSchedule;

use super::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SlicedWasserstein,
    FrechetFeatureDistance,
    ReconL1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::SlicedWasserstein, Metric::FrechetFeatureDistance, Metric::ReconL1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::SlicedWasserstein => "sliced_wasserstein",
            Metric::FrechetFeatureDistance => "frechet_feature_distance",
            Metric::ReconL1 => "recon_l1",
        }
    }

    pub fn parse(name: &str) -> Result<Metric> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Argument(format!("unknown metric `{name}`")))
    }
}

/// Comma-separated metric names; blank input is an empty list.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(Metric::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub samples: usize,
    pub projections: usize,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        EvalSettings {
            samples: cfg.eval_samples,
            projections: cfg.eval_projections,
            sampler_steps: cfg.sampler_steps,
            seed: cfg.eval_seed,
        }
    }
}

/// Metrics between two sets of rows. `recon_l1` pairs rows by index.
pub fn compare_rows(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    metrics: &[Metric],
    settings: &EvalSettings,
) -> Result<Vec<(String, f64)>> {
    metrics
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::SlicedWasserstein => sliced_wasserstein(a, b, settings.projections, settings.seed)?,
                Metric::FrechetFeatureDistance => frechet_distance(a, b)?,
                Metric::ReconL1 => {
                    if a.len() != b.len() || a.is_empty() {
                        return Err(Error::Argument("recon_l1 needs paired sets of equal size".into()));
                    }
                    let n: usize = a.iter().map(Vec::len).sum();
                    a.iter()
                        .zip(b)
                        .flat_map(|(x, y)| x.iter().zip(y).map(|(x, y)| (x - y).abs()))
                        .sum::<f64>()
                        / n as f64
                }
            };
            Ok((m.name().to_string(), v))
        })
        .collect()
}

/// Generated latents against fresh mixture draws, per condition
/// (`<metric>/cond=<c>`) and averaged over conditions (`<metric>`).
pub fn eval_generator(
    generator: &Generator,
    sched: &ShiftedSchedule,
    spec: &MixtureSpec,
    metrics: &[Metric],
    settings: &EvalSettings,
    config_hash: &str,
) -> Result<ExperimentReport> {
    if metrics.contains(&Metric::ReconL1) {
        return Err(Error::Argument("recon_l1 needs a decoder checkpoint".into()));
    }
    if generator.latent() != spec.shape || generator.config.num_conditions != spec.num_conditions() {
        return Err(Error::config("data", "checkpoint and data spec disagree on shape or conditions"));
    }
    let mut report = ExperimentReport::new("eval", config_hash, settings.seed);
    if metrics.is_empty() {
        return Ok(report);
    }
    let k = spec.num_conditions();
    let mut totals = vec![0.0; metrics.len()];
    for c in 0..k {
        let generated = euler_sample(
            generator,
            sched,
            settings.sampler_steps,
            spec.shape,
            derive_seed(settings.seed, c as u64),
            &vec![c; settings.samples],
        )?;
        let truth = spec.sample(c, settings.samples, derive_seed(settings.seed, 1 << 32 | c as u64))?;
        for (i, (name, v)) in compare_rows(&generated.rows(), &truth.rows(), metrics, settings)?.into_iter().enumerate() {
            report.log(0, 0, format!("{name}/cond={c}"), v);
            totals[i] += v;
        }
    }
    for (m, t) in metrics.iter().zip(totals) {
        report.log(0, 0, m.name(), t / k as f64);
    }
    Ok(report)
}

/// Reconstructions of fresh validation images of `domain`: `recon_l1` in
/// pixels, the other metrics on frozen-encoder features.
pub fn eval_rae(
    rae: &Rae,
    domain: Domain,
    metrics: &[Metric],
    settings: &EvalSettings,
    config_hash: &str,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("eval", config_hash, settings.seed);
    if metrics.is_empty() {
        return Ok(report);
    }
    let images = validation_images(domain, settings.samples, settings.seed)?;
    let recon = rae.decode(&rae.encode(&images)?)?;
    let feats = image_features(&rae.encoder, &images)?;
    let recon_feats = image_features(&rae.encoder, &recon)?;
    for &m in metrics {
        let v = match m {
            Metric::ReconL1 => mean_abs_diff(&recon, &images),
            _ => compare_rows(&recon_feats, &feats, &[m], settings)?[0].1,
        };
        report.log(0, 0, m.name(), v);
    }
    Ok(report)
}
