use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::latent::{LatentBatch, LatentShape};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// One isotropic Gaussian component of a condition's mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Per-condition Gaussian mixtures over `N × d` token matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub shape: LatentShape,
    pub conditions: Vec<Vec<Component>>,
}

impl MixtureSpec {
    /// `conditions × components` mixture with equal weights, common `std`,
    /// and means drawn once from `N(0, mean_scale²)` with `seed`.
    pub fn random(
        shape: LatentShape,
        conditions: usize,
        components: usize,
        std: f64,
        mean_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let conditions = (0..conditions)
            .map(|_| {
                (0..components)
                    .map(|_| Component {
                        weight: 1.0 / components as f64,
                        mean: rng.normals(shape.dim()).into_iter().map(|v| v * mean_scale).collect(),
                        std,
                    })
                    .collect()
            })
            .collect();
        let spec = MixtureSpec { shape, conditions };
        spec.validate()?;
        Ok(spec)
    }

    /// The default generation task: 4 conditions × 2 components over 8×16
    /// tokens with component std 0.3.
    pub fn default_task(seed: u64) -> Self {
        Self::random(LatentShape { tokens: 8, channels: 16 }, 4, 2, 0.3, 1.0, seed)
            .expect("valid default task")
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Argument("mixture has no conditions".into()));
        }
        for (c, comps) in self.conditions.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::Argument(format!("condition {c} has no components")));
            }
            let total: f64 = comps.iter().map(|k| k.weight).sum();
            if comps.iter().any(|k| k.weight <= 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!(
                    "condition {c}: weights must be positive and sum to 1 (sum {total})"
                )));
            }
            for k in comps {
                if !(k.std > 0.0) {
                    return Err(Error::Argument(format!("condition {c}: std must be positive")));
                }
                if k.mean.len() != self.shape.dim() {
                    return Err(Error::Dimension(format!(
                        "condition {c}: mean of length {} for {:?}",
                        k.mean.len(),
                        self.shape
                    )));
                }
            }
        }
        Ok(())
    }

    fn components(&self, cond: usize) -> Result<&[Component]> {
        self.conditions.get(cond).map(Vec::as_slice).ok_or_else(|| {
            Error::Argument(format!(
                "condition {cond} out of range ({} conditions)",
                self.conditions.len()
            ))
        })
    }

    /// `B` iid draws of condition `cond`, with the component index of each.
    pub fn sample_labeled(&self, cond: usize, count: usize, seed: u64) -> Result<(LatentBatch, Vec<usize>)> {
        let comps = self.components(cond)?;
        let dim = self.shape.dim();
        let mut data = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = Rng::new(derive_seed(seed, i as u64));
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = comps.len() - 1;
            for (j, c) in comps.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let c = &comps[k];
            data.extend(c.mean.iter().map(|m| m + c.std * rng.normal()));
            labels.push(k);
        }
        let latents = Tensor::new(&[count, self.shape.tokens, self.shape.channels], data)?;
        Ok((LatentBatch::new(latents, vec![cond; count])?, labels))
    }

    pub fn sample(&self, cond: usize, count: usize, seed: u64) -> Result<LatentBatch> {
        Ok(self.sample_labeled(cond, count, seed)?.0)
    }

    /// Draws `per_condition` samples of every condition, concatenated in
    /// condition order.
    pub fn sample_all(&self, per_condition: usize, seed: u64) -> Result<LatentBatch> {
        let mut rows = Vec::new();
        let mut conds = Vec::new();
        for c in 0..self.num_conditions() {
            let b = self.sample(c, per_condition, derive_seed(seed, c as u64))?;
            rows.extend(b.rows());
            conds.extend(b.conditions);
        }
        LatentBatch::from_rows(&rows, self.shape, conds)
    }

    /// Largest log-density of `x` under any single component of `cond`,
    /// without the mixture weight.
    pub fn component_log_density(&self, cond: usize, x: &[f64]) -> Result<f64> {
        let comps = self.components(cond)?;
        if x.len() != self.shape.dim() {
            return Err(Error::Dimension(format!("latent of length {}", x.len())));
        }
        let dim = x.len() as f64;
        Ok(comps
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                -0.5 * dim * (2.0 * PI * c.std * c.std).ln() - 0.5 * sq / (c.std * c.std)
            })
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Log-density of one flattened latent under condition `cond`'s mixture.
    pub fn log_density(&self, cond: usize, x: &[f64]) -> Result<f64> {
        let comps = self.components(cond)?;
        if x.len() != self.shape.dim() {
            return Err(Error::Dimension(format!("latent of length {}", x.len())));
        }
        let dim = x.len() as f64;
        let terms: Vec<f64> = comps
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                c.weight.ln() - 0.5 * dim * (2.0 * PI * c.std * c.std).ln() - 0.5 * sq / (c.std * c.std)
            })
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> LatentShape {
        LatentShape::new(2, 3).unwrap()
    }

    #[test]
    fn tiny_std_collapses_to_mean() {
        let spec = MixtureSpec {
            shape: shape(),
            conditions: vec![vec![Component {
                weight: 1.0,
                mean: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                std: 1e-300,
            }]],
        };
        let b = spec.sample(0, 5, 1).unwrap();
        for i in 0..5 {
            assert_eq!(b.sample(i), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn component_frequencies() {
        let spec = MixtureSpec::random(shape(), 1, 2, 0.3, 1.0, 4).unwrap();
        let (_, labels) = spec.sample_labeled(0, 10_000, 9).unwrap();
        let ones = labels.iter().filter(|&&k| k == 1).count() as f64;
        // Binomial(10⁴, 1/2): σ = 50.
        assert!((ones - 5000.0).abs() <= 150.0, "{ones}");
    }

    #[test]
    fn single_component_mean() {
        let spec = MixtureSpec::random(shape(), 1, 1, 0.7, 1.0, 2).unwrap();
        let b = spec.sample(0, 4000, 3).unwrap();
        let n = 4000.0 * 6.0;
        let mut diff = 0.0;
        for i in 0..4000 {
            for (x, m) in b.sample(i).iter().zip(&spec.conditions[0][0].mean) {
                diff += x - m;
            }
        }
        assert!((diff / n).abs() <= 4.0 * 0.7 / n.sqrt());
    }

    #[test]
    fn sampling_is_pure() {
        let spec = MixtureSpec::default_task(1);
        assert_eq!(spec, MixtureSpec::default_task(1));
        assert_eq!(spec.sample(2, 7, 5).unwrap(), spec.sample(2, 7, 5).unwrap());
        assert!(matches!(spec.sample(4, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn log_density_at_unit_mean() {
        let mean = vec![0.5; 6];
        let spec = MixtureSpec {
            shape: shape(),
            conditions: vec![vec![Component {
                weight: 1.0,
                mean: mean.clone(),
                std: 1.0,
            }]],
        };
        let lp = spec.log_density(0, &mean).unwrap();
        assert!((lp + 3.0 * (2.0 * PI).ln()).abs() < 1e-12);
        let mut far = mean.clone();
        far[0] += 1.0;
        assert!(spec.log_density(0, &far).unwrap() < lp);
    }

    #[test]
    fn validation() {
        let mut spec = MixtureSpec::default_task(0);
        spec.conditions[0][0].weight = 0.9;
        assert!(spec.validate().is_err());
    }
}
