use serde::{Deserialize, Serialize};

use super::codec::Encoder;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Weights of the perceptual, Gram and adversarial terms; ℓ1 has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub gram: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 1.0,
            gram: 100.0,
            adversarial: 10.0,
        }
    }
}

impl LossWeights {
    pub fn l1_only() -> Self {
        LossWeights {
            perceptual: 0.0,
            gram: 0.0,
            adversarial: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, w) in [
            ("loss.omega_L", self.perceptual),
            ("loss.omega_G", self.gram),
            ("loss.omega_A", self.adversarial),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(key, format!("weight {w} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// Feature map used by the perceptual and Gram terms: `[B, C, H, W] → [B, N, d]`.
pub trait FeatureExtractor {
    fn features<'t>(&self, images: &Var<'t>) -> Result<Var<'t>>;
}

impl FeatureExtractor for Encoder {
    fn features<'t>(&self, images: &Var<'t>) -> Result<Var<'t>> {
        Encoder::features(self, images)
    }
}

/// Generator-side adversarial loss of a discriminator.
pub trait Adversary {
    fn generator_loss<'t>(&self, x_hat: &Var<'t>) -> Result<Var<'t>>;
}

/// Placeholder discriminator: contributes exactly zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroAdversary;

impl Adversary for ZeroAdversary {
    fn generator_loss<'t>(&self, x_hat: &Var<'t>) -> Result<Var<'t>> {
        Ok(x_hat.scale(0.0).sum())
    }
}

/// Unweighted value of each term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub gram: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl ReconTerms {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.l1 + w.perceptual * self.perceptual + w.gram * self.gram + w.adversarial * self.adversarial
    }
}

/// Mean over the batch of `‖G(a) − G(b)‖²_F`, `G(F) = FᵀF / (N·d)`.
pub fn gram_loss<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 3 {
        return Err(Error::Dimension(format!("gram_loss: {sa:?} vs {sb:?}")));
    }
    let norm = 1.0 / (sa[1] * sa[2]) as f64;
    let ga = a.bmm(a, true, false)?.scale(norm);
    let gb = b.bmm(b, true, false)?.scale(norm);
    Ok(ga.sub(&gb)?.square().sum().scale(1.0 / sa[0] as f64))
}

/// `ℓ1 + ω_L·perceptual + ω_G·gram + ω_A·adversarial`.
///
/// The perceptual term is the mean squared difference of `features`; the
/// Gram term compares the same features. `adversary = None` leaves the
/// adversarial term at zero (e.g. before its start epoch).
pub fn recon_loss<'t>(
    x: &Var<'t>,
    x_hat: &Var<'t>,
    weights: &LossWeights,
    features: &dyn FeatureExtractor,
    adversary: Option<&dyn Adversary>,
) -> Result<(Var<'t>, ReconTerms)> {
    weights.validate()?;
    if x.shape() != x_hat.shape() {
        return Err(Error::Dimension(format!(
            "recon_loss: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let l1 = x_hat.sub(x)?.abs().mean();
    let mut total = l1;
    let mut terms = ReconTerms {
        l1: l1.item(),
        ..Default::default()
    };
    if weights.perceptual > 0.0 || weights.gram > 0.0 {
        let (fx, fy) = (features.features(x)?, features.features(x_hat)?);
        if weights.perceptual > 0.0 {
            let p = fy.sub(&fx)?.square().mean();
            terms.perceptual = p.item();
            total = total.add(&p.scale(weights.perceptual))?;
        }
        if weights.gram > 0.0 {
            let g = gram_loss(&fy, &fx)?;
            terms.gram = g.item();
            total = total.add(&g.scale(weights.gram))?;
        }
    }
    if let (Some(adv), true) = (adversary, weights.adversarial > 0.0) {
        let a = adv.generator_loss(x_hat)?;
        terms.adversarial = a.item();
        total = total.add(&a.scale(weights.adversarial))?;
    }
    terms.total = total.item();
    Ok((total, terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseAugConfig {
    pub tau: f64,
    pub enabled: bool,
}

impl Default for NoiseAugConfig {
    fn default() -> Self {
        NoiseAugConfig { tau: 0.2, enabled: true }
    }
}

impl NoiseAugConfig {
    pub fn off() -> Self {
        NoiseAugConfig { tau: 0.0, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::config("noise.tau", "must be nonnegative"));
        }
        Ok(())
    }
}

/// `z′ = z + σ·ε` with one `σ ~ |N(0, τ²)|` per batch element. Returns the
/// perturbed latents and the drawn σ values.
pub fn noise_augment(latents: &Tensor, cfg: &NoiseAugConfig, rng: &mut Rng) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let b = latents.shape()[0];
    if !cfg.enabled || cfg.tau == 0.0 {
        return Ok((latents.clone(), vec![0.0; b]));
    }
    let per = latents.numel() / b;
    let mut out = latents.clone();
    let mut sigmas = Vec::with_capacity(b);
    for row in out.data_mut().chunks_mut(per) {
        let sigma = (cfg.tau * rng.normal()).abs();
        for v in row.iter_mut() {
            *v += sigma * rng.normal();
        }
        sigmas.push(sigma);
    }
    out.grad = None;
    Ok((out, sigmas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rae::codec::EncoderConfig;
    use crate::tensor::{seeded_normal, Tape};

    fn gram_value(a: &[f64], b: &[f64], shape: &[usize]) -> f64 {
        let tape = Tape::new();
        let (va, vb) = (
            tape.constant(shape, a.to_vec()).unwrap(),
            tape.constant(shape, b.to_vec()).unwrap(),
        );
        gram_loss(&va, &vb).unwrap().item()
    }

    #[test]
    fn gram_hand_computed_anchors() {
        assert_eq!(gram_value(&[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0], &[1, 2, 2]), 0.0);
        assert_eq!(gram_value(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], &[1, 2, 2]), 1.0 / 16.0);
        let a = seeded_normal(&[2, 3, 4], 1);
        assert_eq!(gram_value(a.data(), a.data(), &[2, 3, 4]), 0.0);
    }

    #[test]
    fn gram_symmetric_and_token_permutation_invariant() {
        let a = seeded_normal(&[2, 5, 3], 1);
        let b = seeded_normal(&[2, 5, 3], 2);
        let ab = gram_value(a.data(), b.data(), &[2, 5, 3]);
        let ba = gram_value(b.data(), a.data(), &[2, 5, 3]);
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
        let perm = [3, 0, 4, 1, 2];
        let shuffle = |x: &Tensor| {
            let mut out = Vec::new();
            for s in 0..2 {
                for &t in &perm {
                    out.extend_from_slice(&x.data()[(s * 5 + t) * 3..(s * 5 + t + 1) * 3]);
                }
            }
            out
        };
        let pab = gram_value(&shuffle(&a), &shuffle(&b), &[2, 5, 3]);
        assert!((pab - ab).abs() < 1e-14);
    }

    fn encoder() -> Encoder {
        Encoder::new(EncoderConfig::toy(5)).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut t = seeded_normal(&[2, 1, 32, 32], seed);
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.1 * *v);
        t
    }

    #[test]
    fn identical_reconstruction_costs_nothing() {
        let tape = Tape::new();
        let x = tape.leaf(&image(1));
        let (total, terms) = recon_loss(&x, &x, &LossWeights::default(), &encoder(), Some(&ZeroAdversary)).unwrap();
        assert_eq!(total.item(), 0.0);
        assert_eq!(terms, ReconTerms::default());
    }

    #[test]
    fn l1_only_is_mean_absolute_error() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 1, 32, 32]));
        let y = tape.leaf(&Tensor::full(&[1, 1, 32, 32], 0.5));
        let (total, _) = recon_loss(&x, &y, &LossWeights::l1_only(), &encoder(), Some(&ZeroAdversary)).unwrap();
        assert_eq!(total.item(), 0.5);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let tape = Tape::new();
        let x = tape.leaf(&image(1));
        let y = tape.leaf(&image(2));
        let w = LossWeights::default();
        let (total, t) = recon_loss(&x, &y, &w, &encoder(), Some(&ZeroAdversary)).unwrap();
        assert!(t.l1 > 0.0 && t.perceptual > 0.0 && t.gram > 0.0 && t.adversarial == 0.0);
        assert!((t.weighted_sum(&w) - total.item()).abs() <= 1e-12);
        assert_eq!(t.total, total.item());
    }

    #[test]
    fn negative_weight_is_a_config_error() {
        let tape = Tape::new();
        let x = tape.leaf(&image(1));
        let w = LossWeights {
            gram: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            recon_loss(&x, &x, &w, &encoder(), None),
            Err(Error::Config { ref key, .. }) if key == "loss.omega_G"
        ));
    }

    #[test]
    fn recon_loss_gradcheck() {
        // Smooth terms only; ℓ1 is checked through the jittered-input losses
        // scope of the gradcheck suite.
        let enc = Encoder::new(EncoderConfig {
            channels: 8,
            ..EncoderConfig::toy(1)
        })
        .unwrap();
        let x = image(3);
        let y = image(4).with_grad();
        let w = LossWeights {
            perceptual: 1.0,
            gram: 100.0,
            adversarial: 0.0,
        };
        let err = gradcheck::check(&[y], |tape, v| {
            let xv = tape.leaf(&x);
            let (total, _) = recon_loss(&xv, &v[0], &w, &enc, None)?;
            Ok(total.sub(&v[0].sub(&xv)?.abs().mean())?)
        })
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn noise_augment_identity_at_zero_tau() {
        let z = seeded_normal(&[4, 2, 3], 1);
        let mut rng = Rng::new(0);
        let cfg = NoiseAugConfig { tau: 0.0, enabled: true };
        let (out, s) = noise_augment(&z, &cfg, &mut rng).unwrap();
        assert_eq!(out.data(), z.data());
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_augment_half_normal_statistics() {
        let n = 100_000;
        let z = Tensor::zeros(&[n, 1, 1]);
        let mut rng = Rng::new(11);
        let (out, sigmas) = noise_augment(&z, &NoiseAugConfig::default(), &mut rng).unwrap();
        let tau: f64 = 0.2;
        let mean = sigmas.iter().sum::<f64>() / n as f64;
        let want = tau * (2.0 / std::f64::consts::PI).sqrt();
        let var_sigma = tau * tau * (1.0 - 2.0 / std::f64::consts::PI);
        assert!((mean - want).abs() <= 3.0 * (var_sigma / n as f64).sqrt(), "{mean}");
        let d = out.data();
        let m = d.iter().sum::<f64>() / n as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        // E[(σε)⁴] = 3·E[σ⁴] = 9τ⁴ bounds the spread of the mean.
        assert!(m.abs() <= 4.0 * (v / n as f64).sqrt(), "{m}");
        assert!((v / (tau * tau) - 1.0).abs() <= 0.05, "{v}");
    }
}
