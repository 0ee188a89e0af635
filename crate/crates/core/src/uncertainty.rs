//! Monte-Carlo uncertainty from the Laplace posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::appearance::{ClassLogLikelihoods, IntensityParams};
use crate::error::{invalid, Error, Result};
use crate::inference::{responsibilities, ShapePosterior};
use crate::linalg::SquareMatrix;
use crate::scalar::Real;
use crate::shape::{clamp_to_bounds, ReferenceLength, ShapeFunction};
use crate::volume::Volume;

pub const DEFAULT_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples<T> {
    pub draws: Vec<Vec<T>>,
    pub seed: u64,
    /// Number of draws with at least one entry clipped to its bound.
    pub clipped: usize,
}

/// Draws `θ★ + L z` with `Σ★ = L Lᵀ` and `z ~ N(0, I)`, clipped to the bounds.
pub fn sample_posterior<T: Real>(posterior: &ShapePosterior<T>, n: usize, seed: u64) -> Result<PosteriorSamples<T>> {
    if n == 0 {
        return Err(invalid("n", "need at least one sample"));
    }
    let p = posterior.theta.len();
    if posterior.covariance.dim() != p || posterior.bounds.len() != p {
        return Err(Error::DimensionMismatch("posterior mean, covariance and bounds".into()));
    }
    let l = posterior.covariance.cholesky()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n);
    let mut clipped = 0;
    let mut z = vec![T::zero(); p];
    for _ in 0..n {
        for v in z.iter_mut() {
            let s: f64 = StandardNormal.sample(&mut rng);
            *v = T::lit(s);
        }
        let mut theta = posterior.theta.clone();
        for i in 0..p {
            for k in 0..=i {
                theta[i] += l[(i, k)] * z[k];
            }
        }
        if clamp_to_bounds(&mut theta, &posterior.bounds) > 0 {
            clipped += 1;
        }
        draws.push(theta);
    }
    Ok(PosteriorSamples { draws, seed, clipped })
}

/// Average of the posterior label fields over the parameter draws.
pub fn marginal_posterior<T: Real>(
    image: &Volume<T>,
    shape: &dyn ShapeFunction<T>,
    samples: &PosteriorSamples<T>,
    theta_i: &IntensityParams<T>,
    l_ref: ReferenceLength<T>,
) -> Result<Volume<T>> {
    if samples.draws.is_empty() {
        return Err(invalid("samples", "no posterior samples"));
    }
    let ll = ClassLogLikelihoods::compute(&image.data, theta_i)?;
    let points = image.grid.positions();
    let inv = T::one() / l_ref.get();
    let mut sum = vec![T::zero(); image.len()];
    for draw in &samples.draws {
        let mut v = shape.evaluate_points(draw, &points)?;
        v.iter_mut().for_each(|s| *s *= inv);
        let u = responsibilities(&ll, &v)?;
        for (acc, x) in sum.iter_mut().zip(u) {
            *acc += x;
        }
    }
    let n = T::lit(samples.draws.len() as f64);
    // clamp guards the last-bit overshoot of the average
    let data = sum.into_iter().map(|s| (s / n).min(T::one())).collect();
    Volume::new(image.grid.clone(), data)
}

/// `exp(mean(log Σᵢ))` over symmetric positive-definite matrices.
pub fn log_euclidean_mean<T: Real>(covariances: &[SquareMatrix<T>]) -> Result<SquareMatrix<T>> {
    let first = covariances
        .first()
        .ok_or_else(|| invalid("covariances", "empty list"))?;
    let p = first.dim();
    let mut acc = SquareMatrix::zeros(p);
    for (i, c) in covariances.iter().enumerate() {
        if c.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "matrix {i} is {0}x{0}, expected {p}x{p}",
                c.dim()
            )));
        }
        if c.asymmetry() > T::lit(1e-10) * c.frobenius_norm() || c.cholesky().is_err() {
            return Err(Error::NotPositiveDefinite { index: Some(i) });
        }
        acc = acc.add(&c.map_spectrum(|x| x.ln()));
    }
    let mean = acc.scale(T::one() / T::lit(covariances.len() as f64));
    Ok(mean.map_spectrum(|x| x.exp()))
}
