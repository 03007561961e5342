//! Small layer helpers shared by the denoiser, decoder and probe.

use crate::rng::{derive_seed, Rng};
use crate::tensor::params::Bound;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 1/fan_in)`.
    FanIn,
    Zeros,
    /// `N(0, std²)`.
    Normal(f64),
}

/// Deterministic parameter initializer: each tensor draws from its own
/// stream derived from the master seed and a running index.
pub struct Initializer {
    seed: u64,
    next: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed, next: 0 }
    }

    pub fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor {
        let idx = self.next;
        self.next += 1;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn => {
                let std = 1.0 / (shape[0] as f64).sqrt();
                Rng::new(derive_seed(self.seed, idx)).normals(n).into_iter().map(|v| v * std).collect()
            }
            Init::Normal(std) => Rng::new(derive_seed(self.seed, idx))
                .normals(n)
                .into_iter()
                .map(|v| v * std)
                .collect(),
        };
        Tensor::new(shape, data).expect("positive extents")
    }
}

/// Affine map over the last axis: weight `[in, out]`, bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight_init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}/weight"), init.tensor(&[fan_in, fan_out], weight_init));
        let bias = store.add(format!("{name}/bias"), init.tensor(&[fan_out], Init::Zeros));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear(p.get(self.weight), Some(p.get(self.bias)))
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}
