//! Flat `key = value` experiment configs with a canonical serialization.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::conditioning::GeneratorConfig;
use crate::datagen::MixtureSpec;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::latent::LatentShape;
use crate::schedule::ShiftedSchedule;
use crate::tensor::optim::{AdamWConfig, CosineSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub latent: LatentShape,
    pub shift: bool,
    /// Reference dimension `n` of the shift; `m = N·d`.
    pub shift_base_dim: usize,
    pub denoiser_hidden: usize,
    pub denoiser_depth: usize,
    pub denoiser_heads: usize,
    /// 0 disables the wide head.
    pub head_width: usize,
    pub head_depth: usize,
    pub cond_dim: usize,
    pub freq_dim: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    /// EMA decay of the evaluated weights; 0 evaluates the raw weights.
    pub ema: f64,
    pub batch: usize,
    pub steps: u64,
    pub eval_interval: u64,
    pub data_conditions: usize,
    pub data_components: usize,
    pub data_std: f64,
    pub data_mean_scale: f64,
    pub data_seed: u64,
    pub eval_samples: usize,
    pub eval_projections: usize,
    pub sampler_steps: usize,
    pub eval_seed: u64,
}

impl Default for ExperimentConfig {
    /// The toy generation task.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            latent: LatentShape { tokens: 8, channels: 16 },
            shift: false,
            shift_base_dim: 64,
            denoiser_hidden: 48,
            denoiser_depth: 2,
            denoiser_heads: 4,
            head_width: 0,
            head_depth: 2,
            cond_dim: 32,
            freq_dim: 32,
            lr: 1e-3,
            min_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            warmup_ratio: 0.0134,
            grad_clip: 1.0,
            ema: 0.999,
            batch: 64,
            steps: 3000,
            eval_interval: 1000,
            data_conditions: 4,
            data_components: 2,
            data_std: 0.3,
            data_mean_scale: 1.0,
            data_seed: 0,
            eval_samples: 256,
            eval_projections: 64,
            sampler_steps: 32,
            eval_seed: 1_000_003,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

impl ExperimentConfig {
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            m.insert(k, v);
        };
        put("seed", self.seed.to_string());
        put("latent.tokens", self.latent.tokens.to_string());
        put("latent.channels", self.latent.channels.to_string());
        put("schedule.shift", self.shift.to_string());
        put("schedule.base_dim", self.shift_base_dim.to_string());
        put("denoiser.hidden", self.denoiser_hidden.to_string());
        put("denoiser.depth", self.denoiser_depth.to_string());
        put("denoiser.heads", self.denoiser_heads.to_string());
        put("denoiser.head_width", self.head_width.to_string());
        put("denoiser.head_depth", self.head_depth.to_string());
        put("denoiser.cond_dim", self.cond_dim.to_string());
        put("denoiser.freq_dim", self.freq_dim.to_string());
        put("optim.lr", self.lr.to_string());
        put("optim.min_lr", self.min_lr.to_string());
        put("optim.beta1", self.beta1.to_string());
        put("optim.beta2", self.beta2.to_string());
        put("optim.weight_decay", self.weight_decay.to_string());
        put("optim.warmup_ratio", self.warmup_ratio.to_string());
        put("optim.grad_clip", self.grad_clip.to_string());
        put("optim.ema", self.ema.to_string());
        put("train.batch", self.batch.to_string());
        put("train.steps", self.steps.to_string());
        put("train.eval_interval", self.eval_interval.to_string());
        put("data.conditions", self.data_conditions.to_string());
        put("data.components", self.data_components.to_string());
        put("data.std", self.data_std.to_string());
        put("data.mean_scale", self.data_mean_scale.to_string());
        put("data.seed", self.data_seed.to_string());
        put("eval.samples", self.eval_samples.to_string());
        put("eval.projections", self.eval_projections.to_string());
        put("eval.sampler_steps", self.sampler_steps.to_string());
        put("eval.seed", self.eval_seed.to_string());
        m
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "latent.tokens" => self.latent.tokens = parse(key, v)?,
            "latent.channels" => self.latent.channels = parse(key, v)?,
            "schedule.shift" => self.shift = parse(key, v)?,
            "schedule.base_dim" => self.shift_base_dim = parse(key, v)?,
            "denoiser.hidden" => self.denoiser_hidden = parse(key, v)?,
            "denoiser.depth" => self.denoiser_depth = parse(key, v)?,
            "denoiser.heads" => self.denoiser_heads = parse(key, v)?,
            "denoiser.head_width" => self.head_width = parse(key, v)?,
            "denoiser.head_depth" => self.head_depth = parse(key, v)?,
            "denoiser.cond_dim" => self.cond_dim = parse(key, v)?,
            "denoiser.freq_dim" => self.freq_dim = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.min_lr" => self.min_lr = parse(key, v)?,
            "optim.beta1" => self.beta1 = parse(key, v)?,
            "optim.beta2" => self.beta2 = parse(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse(key, v)?,
            "optim.warmup_ratio" => self.warmup_ratio = parse(key, v)?,
            "optim.grad_clip" => self.grad_clip = parse(key, v)?,
            "optim.ema" => self.ema = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.eval_interval" => self.eval_interval = parse(key, v)?,
            "data.conditions" => self.data_conditions = parse(key, v)?,
            "data.components" => self.data_components = parse(key, v)?,
            "data.std" => self.data_std = parse(key, v)?,
            "data.mean_scale" => self.data_mean_scale = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "eval.samples" => self.eval_samples = parse(key, v)?,
            "eval.projections" => self.eval_projections = parse(key, v)?,
            "eval.sampler_steps" => self.sampler_steps = parse(key, v)?,
            "eval.seed" => self.eval_seed = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One `key = value` line per field, sorted by key.
    pub fn canonical(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.denoiser_hidden,
            depth: self.denoiser_depth,
            heads: self.denoiser_heads,
            latent: self.latent,
            ddt_head_width: (self.head_width > 0).then_some(self.head_width),
            ddt_head_depth: self.head_depth,
            cond_dim: self.cond_dim,
            freq_dim: self.freq_dim,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            denoiser: self.denoiser(),
            num_conditions: self.data_conditions,
        }
    }

    pub fn schedule(&self) -> Result<ShiftedSchedule> {
        if self.shift {
            ShiftedSchedule::for_latents(self.shift_base_dim, self.latent.tokens, self.latent.channels)
        } else {
            Ok(ShiftedSchedule::identity())
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn lr_schedule(&self) -> CosineSchedule {
        CosineSchedule {
            max_lr: self.lr,
            min_lr: self.min_lr,
            warmup_ratio: self.warmup_ratio,
            total_steps: self.steps,
        }
    }

    pub fn mixture(&self) -> Result<MixtureSpec> {
        MixtureSpec::random(
            self.latent,
            self.data_conditions,
            self.data_components,
            self.data_std,
            self.data_mean_scale,
            self.data_seed,
        )
        .map_err(|e| Error::config("data", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        if self.shift && self.shift_base_dim == 0 {
            return Err(Error::config("schedule.base_dim", "must be positive"));
        }
        for (key, v) in [("optim.lr", self.lr), ("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.beta1 >= 1.0 {
            return Err(Error::config("optim.beta1", "must be below 1"));
        }
        if self.beta2 >= 1.0 {
            return Err(Error::config("optim.beta2", "must be below 1"));
        }
        if !(0.0..=self.lr).contains(&self.min_lr) {
            return Err(Error::config("optim.min_lr", "must lie in [0, optim.lr]"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("optim.warmup_ratio", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::config("optim.ema", "must lie in [0, 1)"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("optim.grad_clip", "must be nonnegative (0 disables)"));
        }
        let positive = [
            ("train.batch", self.batch),
            ("train.eval_interval", self.eval_interval as usize),
            ("data.components", self.data_components),
            ("eval.samples", self.eval_samples),
            ("eval.projections", self.eval_projections),
            ("eval.sampler_steps", self.sampler_steps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.data_std > 0.0) {
            return Err(Error::config("data.std", "must be positive"));
        }
        Ok(())
    }

    /// Writes `config.lock` (the canonical text) into `dir`.
    pub fn write_lock(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.lock"), self.canonical())?;
        Ok(())
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Contract(format!("{} is in use by another run", dir.display()))
            } else {
                e.into()
            }
        })?;
        Ok(DirLock { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.lr = 0.000123456789;
        cfg.shift = true;
        let back = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let text = cfg.canonical();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn hash_changes_iff_a_field_changes() {
        let base = ExperimentConfig::default();
        let same = ExperimentConfig::parse("# comment\n\nseed = 0\n").unwrap();
        assert_eq!(base.hash(), same.hash());
        let defaults = base.pairs();
        for (key, value) in &defaults {
            let mut other = base.clone();
            let changed = match *key {
                "schedule.shift" => "true".to_string(),
                _ if value.contains('.') || value.contains('e') => format!("{}", value.parse::<f64>().unwrap() * 0.5),
                _ => format!("{}", value.parse::<u64>().unwrap() + 1),
            };
            other.set(key, &changed).unwrap();
            assert_ne!(other.hash(), base.hash(), "{key}");
        }
    }

    #[test]
    fn errors_name_the_key() {
        let err = ExperimentConfig::parse("optim.lr = -1").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "optim.lr"));
        let err = ExperimentConfig::parse("train.bogus = 3").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.bogus"));
        let err = ExperimentConfig::parse("denoiser.heads = 5").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "denoiser.hidden"));
    }

    #[test]
    fn directory_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Contract(_))));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }
}
