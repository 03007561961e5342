//! Condition embeddings and the conditioned generator: a denoiser whose
//! condition vector is a learned row of an embedding table, trained jointly.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::denoiser::{DenoiserConfig, DenoiserLayout};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::latent::LatentShape;
use crate::nn::{Init, Initializer};
use crate::rng::derive_seed;
use crate::tensor::checkpoint;
use crate::tensor::params::Bound;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionerConfig {
    pub num_conditions: usize,
    pub cond_dim: usize,
    /// Carried as metadata only.
    pub num_query_tokens: usize,
}

impl ConditionerConfig {
    pub fn new(num_conditions: usize, cond_dim: usize) -> Self {
        ConditionerConfig {
            num_conditions,
            cond_dim,
            num_query_tokens: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_conditions == 0 {
            return Err(Error::config("conditioner.num_conditions", "must be positive"));
        }
        if self.cond_dim == 0 {
            return Err(Error::config("conditioner.cond_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Learned `[num_conditions, cond_dim]` table.
#[derive(Clone, Copy, Debug)]
pub struct Conditioner {
    pub config: ConditionerConfig,
    table: ParamId,
}

const EMBED_STD: f64 = 1.0;

impl Conditioner {
    pub fn register(store: &mut ParamStore, prefix: &str, config: ConditionerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let table = store.add(
            format!("{prefix}/embedding"),
            init.tensor(&[config.num_conditions, config.cond_dim], Init::Normal(EMBED_STD)),
        );
        Ok(Conditioner { config, table })
    }

    fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.num_conditions) {
            Some(bad) => Err(Error::Argument(format!(
                "condition id {bad} out of range ({} conditions)",
                self.config.num_conditions
            ))),
            None => Ok(()),
        }
    }

    /// `[len(ids), cond_dim]` embedding rows.
    pub fn embed<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        self.check(ids)?;
        p.get(self.table).gather_rows(ids)
    }

    /// The embedding row of one condition.
    pub fn embed_condition(&self, params: &ParamStore, id: usize) -> Result<Vec<f64>> {
        self.check(&[id])?;
        let d = self.config.cond_dim;
        Ok(params.get(self.table).data()[id * d..(id + 1) * d].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub denoiser: DenoiserConfig,
    pub num_conditions: usize,
}

impl GeneratorConfig {
    pub fn conditioner(&self) -> ConditionerConfig {
        ConditionerConfig::new(self.num_conditions, self.denoiser.cond_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.conditioner().validate()
    }
}

/// Denoiser plus condition table in one parameter store
/// (`denoiser/…`, `conditioner/embedding`).
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    pub denoiser: DenoiserLayout,
    pub conditioner: Conditioner,
}

const CKPT_PREFIX: &str = "generator";

impl Generator {
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let denoiser = DenoiserLayout::register(&mut params, "denoiser", &config.denoiser, derive_seed(seed, 0))?;
        let conditioner = Conditioner::register(&mut params, "conditioner", config.conditioner(), derive_seed(seed, 1))?;
        Ok(Generator {
            config: config.clone(),
            params,
            denoiser,
            conditioner,
        })
    }

    pub fn latent(&self) -> LatentShape {
        self.config.denoiser.latent
    }

    /// Writes the parameters as a checkpoint and the config as JSON next to
    /// it (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params.export(CKPT_PREFIX))?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: GeneratorConfig = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let mut g = Generator::build(&config, 0)?;
        g.params.import(CKPT_PREFIX, &checkpoint::load(path)?)?;
        Ok(g)
    }
}

pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl VelocityField for Generator {
    fn params(&self) -> Option<&ParamStore> {
        Some(&self.params)
    }

    fn velocity<'t>(&self, p: &Bound<'t>, x_t: &Var<'t>, t: &[f64], cond: &[usize]) -> Result<Var<'t>> {
        let c = self.conditioner.embed(p, cond)?;
        self.denoiser.forward(p, x_t, t, &c)
    }
}

/// Convenience: velocity of `generator` without gradients.
pub fn predict(generator: &Generator, x_t: &crate::tensor::Tensor, t: &[f64], cond: &[usize]) -> Result<crate::tensor::Tensor> {
    let tape = Tape::new();
    let p = generator.params.bind(&tape);
    let x = tape.constant(x_t.shape(), x_t.data().to_vec())?;
    Ok(generator.velocity(&p, &x, t, cond)?.to_tensor())
}
