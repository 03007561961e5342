use crate::error::{Error, Result};
use crate::rng::Rng;

/// 2-Wasserstein distance between two 1-D empirical distributions with
/// uniform weights (sorted in place).
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / na as f64).sqrt();
    }
    // Integrate (F_a⁻¹(u) − F_b⁻¹(u))² over the merged quantile breakpoints.
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut s = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        s += (next - u) * (a[i] - b[j]) * (a[i] - b[j]);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    s.sqrt()
}

/// Mean over `projections` random unit directions of the 1-D
/// 2-Wasserstein distance between the projected sample sets. Directions are
/// drawn from `seed`, so equal seeds compare sets along equal directions.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("sliced Wasserstein of an empty set".into()));
    }
    if projections == 0 {
        return Err(Error::Argument("need at least one projection".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Dimension("samples have differing dimensions".into()));
    }
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    for _ in 0..projections {
        let mut dir = rng.normals(dim);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        for (p, r) in pa.iter_mut().zip(a) {
            *p = r.iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        for (p, r) in pb.iter_mut().zip(b) {
            *p = r.iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        total += wasserstein_1d(&mut pa, &mut pb);
    }
    Ok(total / projections as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn cloud(n: usize, dim: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| (0..dim).map(|k| rng.normal() + shift[k]).collect())
            .collect()
    }

    #[test]
    fn identical_sets() {
        let a = cloud(50, 4, &[0.0; 4], 1);
        assert_eq!(sliced_wasserstein(&a, &a, 16, 3).unwrap(), 0.0);
    }

    #[test]
    fn point_masses_in_one_dimension() {
        let a = vec![vec![0.0]; 5];
        let b = vec![vec![2.5]; 7];
        for p in [1, 3, 10] {
            let d = sliced_wasserstein(&a, &b, p, 11).unwrap();
            assert!((d - 2.5).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn unequal_counts_quantile_integral() {
        // {0, 1} vs {0, 0.5, 1}: pieces on [0,1/3],[1/3,1/2],[1/2,2/3],[2/3,1].
        let mut a = vec![0.0, 1.0];
        let mut b = vec![0.0, 0.5, 1.0];
        let want = (0.25f64 / 3.0).sqrt();
        assert!((wasserstein_1d(&mut a, &mut b) - want).abs() < 1e-12);
    }

    #[test]
    fn gaussian_shift_matches_projection_oracle() {
        let dim = 8;
        let mu: Vec<f64> = (0..dim).map(|k| if k < 2 { 1.0 } else { 0.0 }).collect();
        let a = cloud(10_000, dim, &[0.0; 8], 1);
        let b = cloud(10_000, dim, &mu, 2);
        let sw = sliced_wasserstein(&a, &b, 128, 5).unwrap();
        // Projected Gaussians N(0,1) and N(θ·μ,1) are 2-Wasserstein |θ·μ| apart;
        // average over 10⁴ random directions.
        let mut rng = Rng::new(77);
        let mut acc = 0.0;
        for _ in 0..10_000 {
            let dir = rng.normals(dim);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += dir.iter().zip(&mu).map(|(d, m)| d * m).sum::<f64>().abs() / norm;
        }
        let oracle = acc / 10_000.0;
        assert!((sw - oracle).abs() <= 0.1 * oracle, "{sw} vs {oracle}");
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(sliced_wasserstein(&[], &[vec![1.0]], 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_translation_invariant(seed in 0u64..1000, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let a = cloud(40, 2, &[0.0, 0.0], seed);
            let b = cloud(30, 2, &[1.0, -0.5], seed + 1);
            let ab = sliced_wasserstein(&a, &b, 8, 4).unwrap();
            let ba = sliced_wasserstein(&b, &a, 8, 4).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let shift = |s: &[Vec<f64>]| s.iter().map(|r| vec![r[0] + dx, r[1] + dy]).collect::<Vec<_>>();
            let moved = sliced_wasserstein(&shift(&a), &shift(&b), 8, 4).unwrap();
            prop_assert!((moved - ab).abs() <= 1e-10);
        }
    }
}
