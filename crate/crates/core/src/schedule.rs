//! Timestep schedules and the dimension-dependent shift.
//!
//! The shift is the Möbius map `t ↦ αt / (1 + (α − 1)t)` with
//! `α = √(m / n)`, where `m` is the effective latent dimension (tokens ×
//! channels) and `n` a reference dimension. It fixes both endpoints, is
//! strictly increasing for `α > 0`, inverts with `α⁻¹`, and composes
//! multiplicatively in `α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_BASE_DIM: usize = 4096;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftedSchedule {
    base_dim: usize,
    effective_dim: usize,
    alpha: f64,
}

impl ShiftedSchedule {
    /// Schedule for effective dimension `m` against base dimension `n`.
    pub fn new(base_dim: usize, effective_dim: usize) -> Result<Self> {
        if base_dim == 0 || effective_dim == 0 {
            return Err(Error::Argument(format!(
                "dimensions must be positive (n = {base_dim}, m = {effective_dim})"
            )));
        }
        Ok(ShiftedSchedule {
            base_dim,
            effective_dim,
            alpha: (effective_dim as f64 / base_dim as f64).sqrt(),
        })
    }

    /// Schedule for `tokens × channels` latents.
    pub fn for_latents(base_dim: usize, tokens: usize, channels: usize) -> Result<Self> {
        Self::new(base_dim, tokens * channels)
    }

    /// The unshifted schedule (`α = 1`).
    pub fn identity() -> Self {
        ShiftedSchedule {
            base_dim: 1,
            effective_dim: 1,
            alpha: 1.0,
        }
    }

    /// Overrides α directly, for ablations.
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(ShiftedSchedule {
            base_dim: 0,
            effective_dim: 0,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn effective_dim(&self) -> usize {
        self.effective_dim
    }

    pub fn shift(&self, t_n: f64) -> Result<f64> {
        check_unit(t_n, "t_n")?;
        Ok(mobius(self.alpha, t_n))
    }

    pub fn inverse_shift(&self, t_m: f64) -> Result<f64> {
        check_unit(t_m, "t_m")?;
        Ok(mobius(1.0 / self.alpha, t_m))
    }

    /// `steps + 1` strictly decreasing timesteps from 1 to 0: the uniform
    /// grid `1, (steps−1)/steps, …, 0` pushed through the shift.
    pub fn sampler_grid(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::Argument("sampler needs at least one step".into()));
        }
        Ok((0..=steps)
            .map(|i| {
                let t = (steps - i) as f64 / steps as f64;
                mobius(self.alpha, t)
            })
            .collect())
    }

    /// Training timestep: `t_n ~ Uniform(0, 1)` pushed through the shift.
    pub fn sample_train_timestep(&self, rng: &mut Rng) -> f64 {
        mobius(self.alpha, rng.uniform())
    }
}

fn check_unit(t: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {t} lies outside [0, 1]")))
    }
}

#[inline]
fn mobius(alpha: f64, t: f64) -> f64 {
    if t == 0.0 || t == 1.0 {
        return t;
    }
    alpha * t / (1.0 + (alpha - 1.0) * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn paper_geometry() -> ShiftedSchedule {
        ShiftedSchedule::for_latents(4096, 256, 1152).unwrap()
    }

    #[test]
    fn alpha_for_reference_geometry() {
        let s = paper_geometry();
        assert_eq!(s.effective_dim(), 294_912);
        assert!((s.alpha() - 72f64.sqrt()).abs() <= f64::EPSILON * 72f64.sqrt());
        assert!((s.alpha() - 8.485_281).abs() < 1e-6);
    }

    #[test]
    fn shift_examples() {
        let s = paper_geometry();
        assert_eq!(s.shift(0.0).unwrap(), 0.0);
        assert_eq!(s.shift(1.0).unwrap(), 1.0);
        // αt/(1+(α−1)t) at t = 1/2 is α/(α+1).
        let want = 72f64.sqrt() / (72f64.sqrt() + 1.0);
        let got = s.shift(0.5).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.894_573_501_771_287_7).abs() < 1e-6);
        let id = ShiftedSchedule::new(64, 64).unwrap();
        assert_eq!(id.alpha(), 1.0);
        for t in [0.1, 0.37, 0.9] {
            assert_eq!(id.shift(t).unwrap(), t);
        }
    }

    #[test]
    fn shift_domain_errors() {
        let s = paper_geometry();
        assert!(matches!(s.shift(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.shift(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.inverse_shift(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_examples() {
        let s = paper_geometry();
        let back = s.inverse_shift(s.shift(0.25).unwrap()).unwrap();
        assert!((back - 0.25).abs() <= 1e-12);
        let two = ShiftedSchedule::with_alpha(2.0).unwrap();
        assert!((two.inverse_shift(2.0 / 3.0).unwrap() - 0.5).abs() < 1e-15);
        let id = ShiftedSchedule::identity();
        assert_eq!(id.inverse_shift(0.3).unwrap(), 0.3);
    }

    #[test]
    fn grid_examples() {
        let id = ShiftedSchedule::identity();
        assert_eq!(id.sampler_grid(1).unwrap(), vec![1.0, 0.0]);
        assert_eq!(id.sampler_grid(2).unwrap(), vec![1.0, 0.5, 0.0]);
        let g = paper_geometry().sampler_grid(2).unwrap();
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 0.894_573_501_771_287_7).abs() < 1e-6);
        assert_eq!(g[2], 0.0);
        assert!(matches!(id.sampler_grid(0), Err(Error::Argument(_))));
        let g50 = paper_geometry().sampler_grid(50).unwrap();
        assert_eq!(g50.len(), 51);
        assert!(g50.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn train_timestep_distribution() {
        let id = ShiftedSchedule::identity();
        let mut rng = Rng::new(1);
        let mean = (0..100_000).map(|_| id.sample_train_timestep(&mut rng)).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");

        let s = paper_geometry();
        let mut rng = Rng::new(1);
        let mean = (0..100_000).map(|_| s.sample_train_timestep(&mut rng)).sum::<f64>() / 1e5;
        assert!(mean > 0.5, "{mean}");

        let draw = |seed| {
            let mut r = Rng::new(seed);
            (0..10).map(|_| s.sample_train_timestep(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn composition_on_grid() {
        let (a1, a2) = (3.7, 0.21);
        let s1 = ShiftedSchedule::with_alpha(a1).unwrap();
        let s2 = ShiftedSchedule::with_alpha(a2).unwrap();
        let s12 = ShiftedSchedule::with_alpha(a1 * a2).unwrap();
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let two = s2.shift(s1.shift(t).unwrap()).unwrap();
            assert!((two - s12.shift(t).unwrap()).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn composition_law(la1 in -6.9f64..6.9, la2 in -6.9f64..6.9, t in 0.0f64..=1.0) {
            let (a1, a2) = (la1.exp(), la2.exp());
            let s1 = ShiftedSchedule::with_alpha(a1).unwrap();
            let s2 = ShiftedSchedule::with_alpha(a2).unwrap();
            let s12 = ShiftedSchedule::with_alpha(a1 * a2).unwrap();
            let lhs = s2.shift(s1.shift(t).unwrap()).unwrap();
            prop_assert!((lhs - s12.shift(t).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn monotone_and_bounded(la in -6.9f64..6.9, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let s = ShiftedSchedule::with_alpha(la.exp()).unwrap();
            let (y1, y2) = (s.shift(t1).unwrap(), s.shift(t2).unwrap());
            prop_assert!((0.0..=1.0).contains(&y1));
            if t1 < t2 { prop_assert!(y1 <= y2); }
            if (1e-6..1.0 - 1e-6).contains(&t1) {
                if la > 1e-3 { prop_assert!(y1 > t1); }
                if la < -1e-3 { prop_assert!(y1 < t1); }
            }
        }

        #[test]
        fn inverse_round_trip(la in -6.9f64..6.9, t in 0.0f64..=1.0) {
            let s = ShiftedSchedule::with_alpha(la.exp()).unwrap();
            let back = s.inverse_shift(s.shift(t).unwrap()).unwrap();
            prop_assert!((back - t).abs() <= 1e-12);
        }
    }
}
