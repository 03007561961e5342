use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::codec::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to every covariance diagonal before taking square roots.
pub const SHRINKAGE: f64 = 1e-6;

fn moments(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, dim) = (set.len(), set[0].len());
    let mut mean = DVector::zeros(dim);
    for row in set {
        mean += DVector::from_column_slice(row);
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(n, dim);
    for (i, row) in set.iter().enumerate() {
        for j in 0..dim {
            centered[(i, j)] = row[j] - mean[j];
        }
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for j in 0..dim {
        cov[(j, j)] += SHRINKAGE;
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((A·B)^½)` as `Σ √λ(S·B·S)` with `S = A^½`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = psd_sqrt(a);
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussians fitted to two sets of feature vectors:
/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa·Σb)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument(format!(
            "Fréchet distance needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Dimension("feature vectors differ in length".into()));
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let mean_term = (&ma - &mb).norm_squared();
    // Both orderings, averaged, so the result is exactly symmetric.
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Per-image flattened encoder features of `images: [B, C, H, W]`.
pub fn image_features(encoder: &Encoder, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let z = encoder.encode(images)?;
    let per = z.numel() / z.shape()[0];
    Ok(z.data().chunks(per).map(<[f64]>::to_vec).collect())
}

/// Per-image encoder features averaged over tokens (`[B, C]` rows).
pub fn pooled_image_features(encoder: &Encoder, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let z = encoder.encode(images)?;
    let (b, c) = (z.shape()[0], z.shape()[z.shape().len() - 1]);
    let tokens = z.numel() / (b * c);
    Ok(z.data()
        .chunks(tokens * c)
        .map(|img| {
            let mut m = vec![0.0; c];
            for tok in img.chunks(c) {
                for (a, v) in m.iter_mut().zip(tok) {
                    *a += v / tokens as f64;
                }
            }
            m
        })
        .collect())
}

/// Fréchet distance between frozen-encoder features of two image sets.
pub fn frechet_feature_distance(encoder: &Encoder, a: &Tensor, b: &Tensor) -> Result<f64> {
    frechet_distance(&image_features(encoder, a)?, &image_features(encoder, b)?)
}
