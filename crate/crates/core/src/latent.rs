use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token geometry of a latent: `tokens × channels` per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub tokens: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn new(tokens: usize, channels: usize) -> Result<Self> {
        if tokens == 0 || channels == 0 {
            return Err(Error::Argument(format!(
                "latent shape needs N ≥ 1 and d ≥ 1, got {tokens}×{channels}"
            )));
        }
        Ok(LatentShape { tokens, channels })
    }

    /// Effective dimension `m = N·d`.
    pub fn dim(&self) -> usize {
        self.tokens * self.channels
    }
}

/// A `B × N × d` batch of latents with one condition id per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub latents: Tensor,
    pub conditions: Vec<usize>,
}

impl LatentBatch {
    pub fn new(latents: Tensor, conditions: Vec<usize>) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 3 || s[0] != conditions.len() {
            return Err(Error::Dimension(format!(
                "latent batch {s:?} with {} conditions",
                conditions.len()
            )));
        }
        Ok(LatentBatch { latents, conditions })
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn shape(&self) -> LatentShape {
        let s = self.latents.shape();
        LatentShape {
            tokens: s[1],
            channels: s[2],
        }
    }

    /// Flattened latent of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        self.latents.row(i)
    }

    /// Samples as rows of length `N·d`.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.sample(i).to_vec()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], shape: LatentShape, conditions: Vec<usize>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * shape.dim());
        for r in rows {
            if r.len() != shape.dim() {
                return Err(Error::Dimension(format!("row of {} values for {shape:?}", r.len())));
            }
            data.extend_from_slice(r);
        }
        LatentBatch::new(
            Tensor::new(&[rows.len(), shape.tokens, shape.channels], data)?,
            conditions,
        )
    }
}
