//! EM inference: E-step label posteriors, the log-joint, the Gauss-Newton
//! shape step and the outer fitting loop.
//!
//! The shape step minimizes the cross-entropy between the responsibilities
//! `U` and the logistic prior, linearized in the shape parameters:
//!
//! `J(δ) = −Σ [u log σ(V + dᵀδ) + (1 − u) log σ(−V − dᵀδ)] + ½ δᵀ Σ₀⁻¹ δ`
//!
//! with `V = S̃/l_ref` and `d = ∇S̃/l_ref`. The Laplace covariance of the
//! shape posterior is the inverse of the Gauss-Newton curvature of `J`.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{relative_change, ClassLogLikelihoods, IntensityParams, MiOptions, MiReport};
use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, SquareMatrix};
use crate::scalar::{block_sum, Real, REDUCTION_BLOCK};
use crate::shape::{
    at_voxel, check_in_bounds, default_fd_steps, log_sigmoid, sigmoid, Bound, ReferenceLength, ShapeFunction,
};
use crate::volume::{BinaryMask, Point3, Volume};

/// Per-voxel posterior foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityField<T>(Volume<T>);

impl<T: Real> ResponsibilityField<T> {
    pub fn new(volume: Volume<T>) -> Result<Self> {
        if let Some(n) = volume.data.iter().position(|&u| !(u >= T::zero() && u <= T::one())) {
            return Err(invalid("U", format!("voxel {n} has responsibility {}", volume.data[n])));
        }
        Ok(Self(volume))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0.data
    }

    pub fn volume(&self) -> &Volume<T> {
        &self.0
    }

    pub fn into_volume(self) -> Volume<T> {
        self.0
    }
}

/// Prior on the shape-parameter increment of the MS-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapePrior<T> {
    #[default]
    Uniform,
    /// Zero-mean Gaussian with the given covariance.
    Gaussian { covariance: SquareMatrix<T> },
}

impl<T: Real> ShapePrior<T> {
    /// `Σ₀⁻¹`, or `None` for the uniform prior.
    pub fn precision(&self, p: usize) -> Result<Option<SquareMatrix<T>>> {
        match self {
            ShapePrior::Uniform => Ok(None),
            ShapePrior::Gaussian { covariance } => {
                if covariance.dim() != p {
                    return Err(Error::DimensionMismatch(format!(
                        "prior covariance is {0}x{0}, shape has {p} parameters",
                        covariance.dim()
                    )));
                }
                if covariance.asymmetry() > T::lit(1e-10) * covariance.frobenius_norm() {
                    return Err(invalid("shape_prior", "covariance is not symmetric"));
                }
                Ok(Some(covariance.inverse_spd()?))
            }
        }
    }
}

/// Laplace approximation `N(θ★, Σ★)` of the shape-parameter posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePosterior<T> {
    pub names: Vec<String>,
    pub theta: Vec<T>,
    pub covariance: SquareMatrix<T>,
    pub bounds: Vec<Bound<T>>,
}

fn check_image<T: Real>(image: &Volume<T>) -> Result<()> {
    if let Some(n) = image.data.iter().position(|v| !v.is_finite()) {
        return Err(at_voxel(n, Error::NonFinite("image intensity")));
    }
    Ok(())
}

/// `u_n = σ(log p₁ − log p₀ + v_n)` for scaled shape values `v`.
pub fn responsibilities<T: Real>(ll: &ClassLogLikelihoods<T>, scaled: &[T]) -> Result<Vec<T>> {
    (0..scaled.len())
        .into_par_iter()
        .map(|n| {
            let (l0, l1) = (ll.background[n], ll.foreground[n]);
            if l0 == T::neg_infinity() && l1 == T::neg_infinity() {
                return Err(Error::DegeneratePosterior(n));
            }
            Ok(sigmoid(l1 - l0 + scaled[n]))
        })
        .collect()
}

fn scale_values<T: Real>(values: &[T], l_ref: ReferenceLength<T>) -> Result<Vec<T>> {
    let inv = T::one() / l_ref.get();
    values
        .iter()
        .enumerate()
        .map(|(n, &s)| {
            if s.is_nan() {
                Err(at_voxel(n, Error::NonFinite("shape value")))
            } else {
                Ok(s * inv)
            }
        })
        .collect()
}

/// Posterior label probabilities.
pub fn e_step<T: Real>(
    image: &Volume<T>,
    shape: &dyn ShapeFunction<T>,
    theta_s: &[T],
    theta_i: &IntensityParams<T>,
    l_ref: ReferenceLength<T>,
) -> Result<ResponsibilityField<T>> {
    check_image(image)?;
    let ll = ClassLogLikelihoods::compute(&image.data, theta_i)?;
    let values = shape.evaluate_points(theta_s, &image.grid.positions())?;
    let u = responsibilities(&ll, &scale_values(&values, l_ref)?)?;
    ResponsibilityField::new(Volume::new(image.grid.clone(), u)?)
}

#[inline]
fn voxel_log_joint<T: Real>(l0: T, l1: T, v: T) -> T {
    let a = l0 + log_sigmoid(-v);
    let b = l1 + log_sigmoid(v);
    let m = a.max(b);
    if m == T::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `Σ_n log Σ_k p(I_n | k) p(k | θ_S)` from precomputed class log-likelihoods.
pub fn log_joint_from<T: Real>(ll: &ClassLogLikelihoods<T>, scaled: &[T]) -> T {
    let parts: Vec<T> = (0..scaled.len())
        .into_par_iter()
        .with_min_len(REDUCTION_BLOCK)
        .map(|n| voxel_log_joint(ll.background[n], ll.foreground[n], scaled[n]))
        .collect();
    block_sum(&parts)
}

/// Log-joint with uniform parameter priors.
pub fn log_joint<T: Real>(
    image: &Volume<T>,
    shape: &dyn ShapeFunction<T>,
    theta_s: &[T],
    theta_i: &IntensityParams<T>,
    l_ref: ReferenceLength<T>,
) -> Result<T> {
    check_image(image)?;
    let ll = ClassLogLikelihoods::compute(&image.data, theta_i)?;
    let values = shape.evaluate_points(theta_s, &image.grid.positions())?;
    Ok(log_joint_from(&ll, &scale_values(&values, l_ref)?))
}

/// Linearized MS-step objective around one set of shape values and gradients.
#[derive(Debug, Clone)]
pub struct MsObjective<'a, T> {
    /// Scaled shape values `V` at the linearization point.
    pub values: &'a [T],
    /// Scaled gradients, row-major `N × P`.
    pub gradients: &'a [T],
    pub u: &'a [T],
    pub precision: Option<&'a SquareMatrix<T>>,
    /// Displacement of the linearization point from the MS-step start.
    pub offset: Vec<T>,
}

impl<'a, T: Real> MsObjective<'a, T> {
    pub fn new(
        values: &'a [T],
        gradients: &'a [T],
        u: &'a [T],
        precision: Option<&'a SquareMatrix<T>>,
        offset: Vec<T>,
    ) -> Result<Self> {
        let n = values.len();
        let p = offset.len();
        if gradients.len() != n * p || u.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "objective with {n} voxels and {p} parameters got {} gradients, {} responsibilities",
                gradients.len(),
                u.len()
            )));
        }
        if precision.is_some_and(|m| m.dim() != p) {
            return Err(Error::DimensionMismatch("prior precision size".into()));
        }
        Ok(Self {
            values,
            gradients,
            u,
            precision,
            offset,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.offset.len()
    }

    #[inline]
    fn row(&self, n: usize) -> &[T] {
        let p = self.parameter_count();
        &self.gradients[n * p..(n + 1) * p]
    }

    #[inline]
    fn linear(&self, n: usize, step: &[T]) -> T {
        let mut z = self.values[n];
        for (g, s) in self.row(n).iter().zip(step) {
            z += *g * *s;
        }
        z
    }

    fn step_from(&self, delta: &[T]) -> Vec<T> {
        delta.iter().zip(&self.offset).map(|(&a, &b)| a - b).collect()
    }

    fn penalty(&self, delta: &[T]) -> T {
        match self.precision {
            None => T::zero(),
            Some(m) => T::half() * crate::linalg::dot(delta, &m.mul_vec(delta)),
        }
    }

    /// Linearized responses `V + dᵀ(δ − offset)`.
    pub fn responses(&self, delta: &[T]) -> Vec<T> {
        let step = self.step_from(delta);
        (0..self.values.len())
            .into_par_iter()
            .with_min_len(REDUCTION_BLOCK)
            .map(|n| self.linear(n, &step))
            .collect()
    }

    pub fn value(&self, delta: &[T]) -> T {
        let z = self.responses(delta);
        cross_entropy(self.u, &z) + self.penalty(delta)
    }

    /// Gradient `g` and Gauss-Newton curvature `H̃` at `δ`.
    pub fn gradient_hessian(&self, delta: &[T]) -> (Vec<T>, SquareMatrix<T>) {
        let p = self.parameter_count();
        let step = self.step_from(delta);
        let n = self.values.len();
        let blocks: Vec<(Vec<T>, Vec<T>)> = (0..n.div_ceil(REDUCTION_BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut g = vec![T::zero(); p];
                let mut h = vec![T::zero(); p * p];
                for i in b * REDUCTION_BLOCK..((b + 1) * REDUCTION_BLOCK).min(n) {
                    let mu = sigmoid(self.linear(i, &step));
                    let c = self.u[i] - mu;
                    let w = mu * (T::one() - mu);
                    let d = self.row(i);
                    for a in 0..p {
                        g[a] -= c * d[a];
                        let wd = w * d[a];
                        if wd != T::zero() {
                            for bb in a..p {
                                h[a * p + bb] += wd * d[bb];
                            }
                        }
                    }
                }
                (g, h)
            })
            .collect();
        let mut g = vec![T::zero(); p];
        let mut h = SquareMatrix::zeros(p);
        for (bg, bh) in blocks {
            for a in 0..p {
                g[a] += bg[a];
                for bb in a..p {
                    h[(a, bb)] += bh[a * p + bb];
                }
            }
        }
        for a in 0..p {
            for bb in 0..a {
                h[(a, bb)] = h[(bb, a)];
            }
        }
        if let Some(m) = self.precision {
            let pd = m.mul_vec(delta);
            for a in 0..p {
                g[a] += pd[a];
            }
            h = h.add(m);
        }
        (g, h)
    }
}

/// `−Σ [u log σ(z) + (1 − u) log σ(−z)]`.
pub fn cross_entropy<T: Real>(u: &[T], z: &[T]) -> T {
    let parts: Vec<T> = u
        .par_iter()
        .zip(z.par_iter())
        .with_min_len(REDUCTION_BLOCK)
        .map(|(&u, &z)| -(u * log_sigmoid(z) + (T::one() - u) * log_sigmoid(-z)))
        .collect();
    block_sum(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct MsOptions<T> {
    /// Relative step tolerance `‖δ‖ / ‖θ‖` of both loops.
    pub epsilon: T,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_halvings: usize,
}

impl<T: Real> Default for MsOptions<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(1e-3),
            max_outer: 20,
            max_inner: 20,
            max_halvings: 12,
        }
    }
}

/// Objective values before and after one accepted inner step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptedStep {
    pub before: f64,
    pub after: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MsReport {
    pub outer_iterations: usize,
    pub inner_steps: Vec<AcceptedStep>,
    /// Times the exact objective rejected a linearized update and it was shortened.
    pub outer_backtracks: usize,
    pub damped: bool,
    /// `‖θ_end − θ_start‖`.
    pub step_norm: f64,
}

pub struct MsOutput<T> {
    pub posterior: ShapePosterior<T>,
    /// Responsibilities at the final shape parameters when class likelihoods were supplied.
    pub u: Vec<T>,
    pub report: MsReport,
}

/// Inputs shared by every MS-step evaluation.
pub struct MsProblem<'a, T> {
    pub shape: &'a dyn ShapeFunction<T>,
    pub points: &'a [Point3<T>],
    /// Class log-likelihoods; when present `U` is refreshed inside the step.
    pub likelihoods: Option<&'a ClassLogLikelihoods<T>>,
    pub l_ref: ReferenceLength<T>,
    pub prior: &'a ShapePrior<T>,
    /// Finite-difference steps for parameters without analytic derivatives.
    pub fd_steps: Option<&'a [T]>,
    pub options: MsOptions<T>,
}

fn solve_damped<T: Real>(h: &SquareMatrix<T>, g: &[T], damped: &mut bool) -> Result<Vec<T>> {
    if let Ok(x) = h.solve_spd(g) {
        return Ok(x);
    }
    let p = h.dim();
    let mut lambda = T::lit(1e-10) * (h.trace().abs() / T::lit(p as f64) + T::one());
    for _ in 0..30 {
        let damped_h = h.add(&SquareMatrix::identity(p).scale(lambda));
        if let Ok(x) = damped_h.solve_spd(g) {
            if !*damped {
                warn!("MS-step curvature not positive definite; added damping {lambda}");
            }
            *damped = true;
            return Ok(x);
        }
        lambda *= T::lit(10.0);
    }
    Err(Error::NotPositiveDefinite { index: None })
}

fn damped_inverse<T: Real>(h: &SquareMatrix<T>, damped: &mut bool) -> Result<SquareMatrix<T>> {
    if let Ok(inv) = h.inverse_spd() {
        return Ok(inv);
    }
    let p = h.dim();
    let mut lambda = T::lit(1e-10) * (h.trace().abs() / T::lit(p as f64) + T::one());
    for _ in 0..30 {
        if let Ok(inv) = h.add(&SquareMatrix::identity(p).scale(lambda)).inverse_spd() {
            warn!("Laplace covariance needed damping {lambda}");
            *damped = true;
            return Ok(inv);
        }
        lambda *= T::lit(10.0);
    }
    Err(Error::NotPositiveDefinite { index: None })
}

fn clip_delta<T: Real>(start: &[T], delta: &[T], bounds: &[Bound<T>]) -> Vec<T> {
    start
        .iter()
        .zip(delta)
        .zip(bounds)
        .map(|((&s, &d), b)| b.clamp(s + d) - s)
        .collect()
}

fn add(a: &[impl Real], b: &[impl Real]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.as_f64() + y.as_f64()).collect()
}

impl<'a, T: Real> MsProblem<'a, T> {
    fn scaled_values(&self, theta: &[T]) -> Result<Vec<T>> {
        scale_values(&self.shape.evaluate_points(theta, self.points)?, self.l_ref)
    }

    fn linearize(&self, theta: &[T], steps: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let (v, mut g) = self.shape.gradient_points(theta, self.points, steps)?;
        let inv = T::one() / self.l_ref.get();
        g.par_iter_mut().for_each(|x| *x *= inv);
        if let Some(n) = g.iter().position(|x| !x.is_finite()) {
            return Err(at_voxel(n / theta.len(), Error::NonFinite("shape gradient")));
        }
        Ok((scale_values(&v, self.l_ref)?, g))
    }

    /// Exact objective the outer loop must not worsen: the log-joint (negated)
    /// when likelihoods are known, otherwise the cross-entropy with fixed `U`.
    fn exact_objective(&self, scaled: &[T], u: &[T], delta: &[T], precision: Option<&SquareMatrix<T>>) -> T {
        let penalty = match precision {
            None => T::zero(),
            Some(m) => T::half() * crate::linalg::dot(delta, &m.mul_vec(delta)),
        };
        match self.likelihoods {
            Some(ll) => -log_joint_from(ll, scaled) + penalty,
            None => cross_entropy(u, scaled) + penalty,
        }
    }

    fn refresh(&self, z: &[T], fallback: &[T]) -> Result<Vec<T>> {
        match self.likelihoods {
            Some(ll) => responsibilities(ll, z),
            None => Ok(fallback.to_vec()),
        }
    }
}

/// Gauss-Newton shape update with Laplace covariance.
pub fn ms_step<T: Real>(problem: &MsProblem<'_, T>, u0: &[T], theta0: &[T]) -> Result<MsOutput<T>> {
    let shape = problem.shape;
    let p = shape.parameter_count();
    let bounds = shape.parameter_bounds();
    check_in_bounds(theta0, &bounds)?;
    if u0.len() != problem.points.len() {
        return Err(Error::DimensionMismatch("responsibilities vs points".into()));
    }
    let steps = match problem.fd_steps {
        Some(s) => s.to_vec(),
        None => default_fd_steps(&bounds),
    };
    let opts = problem.options;
    let precision = problem.prior.precision(p)?;
    let prec = precision.as_ref();

    let mut report = MsReport::default();
    let mut delta = vec![T::zero(); p];
    let mut u = u0.to_vec();
    let mut lin = problem.linearize(theta0, &steps)?;
    let mut lin_delta = delta.clone();
    // exact objective at the current point, for the responsibilities of the outer iteration
    let theta_at = |d: &[T]| -> Vec<T> { theta0.iter().zip(d).map(|(&a, &b)| a + b).collect() };

    for outer in 0..opts.max_outer {
        report.outer_iterations = outer + 1;
        let u_outer = u.clone();
        let exact_before = problem.exact_objective(&lin.0, &u_outer, &delta, prec);
        let mut inner_delta = delta.clone();
        let mut u_inner = u_outer.clone();
        for _ in 0..opts.max_inner {
            let obj = MsObjective::new(&lin.0, &lin.1, &u_inner, prec, lin_delta.clone())?;
            let (g, h) = obj.gradient_hessian(&inner_delta);
            let mut step = solve_damped(&h, &g, &mut report.damped)?;
            step.iter_mut().for_each(|s| *s = -*s);
            let current = theta_at(&inner_delta);
            let j0 = obj.value(&inner_delta);
            let mut accepted = None;
            for halvings in 0..=opts.max_halvings {
                let trial: Vec<T> = clip_delta(&current, &step, &bounds)
                    .iter()
                    .zip(&inner_delta)
                    .map(|(&s, &d)| d + s)
                    .collect();
                let j1 = obj.value(&trial);
                if j1 < j0 {
                    accepted = Some((trial, j1, halvings));
                    break;
                }
                step.iter_mut().for_each(|s| *s *= T::half());
            }
            let Some((trial, j1, halvings)) = accepted else {
                break;
            };
            report.inner_steps.push(AcceptedStep {
                before: j0.as_f64(),
                after: j1.as_f64(),
                halvings,
            });
            let moved: Vec<T> = trial.iter().zip(&inner_delta).map(|(&a, &b)| a - b).collect();
            inner_delta = trial;
            // E-step refresh with the linearized shape values
            let z = obj.responses(&inner_delta);
            u_inner = problem.refresh(&z, &u_inner)?;
            let rel = norm(&moved) / norm(&theta_at(&inner_delta)).max(T::epsilon());
            if rel < opts.epsilon {
                break;
            }
        }

        // accept the linearized update only if the exact objective improves
        let mut candidate = inner_delta;
        let mut scaled = problem.scaled_values(&theta_at(&candidate))?;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let exact = problem.exact_objective(&scaled, &u_outer, &candidate, prec);
            if exact <= exact_before {
                accepted = true;
                break;
            }
            report.outer_backtracks += 1;
            candidate = candidate
                .iter()
                .zip(&delta)
                .map(|(&c, &d)| d + (c - d) * T::half())
                .collect();
            scaled = problem.scaled_values(&theta_at(&candidate))?;
        }
        if !accepted {
            debug!("MS outer iteration {outer}: no improving step");
            break;
        }
        let moved: Vec<T> = candidate.iter().zip(&delta).map(|(&a, &b)| a - b).collect();
        delta = candidate;
        u = problem.refresh(&scaled, &u)?;
        let rel = norm(&moved) / norm(&theta_at(&delta)).max(T::epsilon());
        if rel < opts.epsilon {
            break;
        }
        lin = problem.linearize(&theta_at(&delta), &steps)?;
        lin_delta = delta.clone();
    }

    // Laplace covariance at the final point
    let theta: Vec<T> = theta_at(&delta);
    if lin_delta != delta {
        lin = problem.linearize(&theta, &steps)?;
        lin_delta = delta.clone();
    }
    let obj = MsObjective::new(&lin.0, &lin.1, &u, prec, lin_delta)?;
    let (_, h) = obj.gradient_hessian(&delta);
    let covariance = damped_inverse(&h, &mut report.damped)?;
    report.step_norm = norm(&add(&theta, &theta0.iter().map(|&x| -x).collect::<Vec<T>>()));
    let u = match problem.likelihoods {
        Some(ll) => responsibilities(ll, &lin.0)?,
        None => u,
    };
    Ok(MsOutput {
        posterior: ShapePosterior {
            names: shape.parameter_names(),
            theta,
            covariance,
            bounds,
        },
        u,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct FitConfig<T> {
    /// Reference length of the logistic prior, in shape-function units.
    pub l_ref: T,
    /// Reference length for the final hard segmentation; defaults to `l_ref`.
    pub l_ref_hard: Option<T>,
    /// Outer stop: relative change of the foreground intensity parameters.
    pub epsilon_outer: T,
    pub max_iterations: usize,
    pub ms: MsOptions<T>,
    pub mi: MiOptions<T>,
    pub shape_prior: ShapePrior<T>,
    /// Finite-difference steps; defaults to 1e-3 of each bound width.
    pub fd_steps: Option<Vec<T>>,
    /// Abort when the log-joint falls by more than this fraction of its range.
    pub divergence_fraction: T,
    pub seed: u64,
}

impl<T: Real> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            l_ref: T::lit(0.25),
            l_ref_hard: Some(T::lit(0.25)),
            epsilon_outer: T::lit(0.1),
            max_iterations: 20,
            ms: MsOptions::default(),
            mi: MiOptions::default(),
            shape_prior: ShapePrior::Uniform,
            fd_steps: None,
            divergence_fraction: T::lit(0.1),
            seed: 42,
        }
    }
}

impl<T: Real> FitConfig<T> {
    pub fn validate(&self) -> Result<()> {
        ReferenceLength::new(self.l_ref)?;
        if let Some(h) = self.l_ref_hard {
            ReferenceLength::new(h)?;
        }
        if !(self.epsilon_outer > T::zero()) || !(self.ms.epsilon > T::zero()) {
            return Err(invalid("epsilon", "stopping thresholds must be > 0"));
        }
        if self.max_iterations == 0 || self.ms.max_outer == 0 || self.ms.max_inner == 0 {
            return Err(invalid("max_iterations", "iteration limits must be >= 1"));
        }
        if !(self.divergence_fraction > T::zero()) {
            return Err(invalid("divergence_fraction", "must be > 0"));
        }
        self.mi.validate()
    }
}

/// One row of the outer-loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub log_joint: f64,
    pub theta_s: Vec<f64>,
    pub step_norm: f64,
    pub fg_mu: Vec<f64>,
    pub fg_sigma: Vec<f64>,
    pub mi_rounds: usize,
    pub ms: MsReport,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub posterior: ShapePosterior<T>,
    pub intensity: IntensityParams<T>,
    /// Posterior foreground probability at `l_ref`.
    pub responsibilities: ResponsibilityField<T>,
    /// Prior field `σ(S̃/l_ref)` at `θ★`.
    pub prior: Volume<T>,
    /// Posterior at `l_ref_hard` thresholded at 0.5.
    pub sroi: BinaryMask<T>,
    /// Prior thresholded at 0.5, i.e. `S̃ ≥ 0`.
    pub ssi: BinaryMask<T>,
    pub log_joint: T,
    pub trace: Vec<TraceRow>,
    pub mi_reports: Vec<MiReport>,
}

/// Voxelwise `field ≥ threshold`.
pub fn hard_segmentation<T: Real>(field: &Volume<T>, threshold: T) -> BinaryMask<T> {
    BinaryMask::threshold(field, threshold)
}

fn trace_row<T: Real>(
    iteration: usize,
    log_joint: T,
    theta: &[T],
    step_norm: f64,
    intensity: &IntensityParams<T>,
    mi_rounds: usize,
    ms: MsReport,
) -> TraceRow {
    TraceRow {
        iteration,
        log_joint: log_joint.as_f64(),
        theta_s: theta.iter().map(|v| v.as_f64()).collect(),
        step_norm,
        fg_mu: intensity.foreground.iter().map(|c| c.mu.as_f64()).collect(),
        fg_sigma: intensity.foreground.iter().map(|c| c.sigma.as_f64()).collect(),
        mi_rounds,
        ms,
    }
}

/// EM fit: E-step, MS-step, MI-steps, repeated until the foreground
/// intensity parameters settle.
pub fn fit<T: Real>(
    image: &Volume<T>,
    shape: &dyn ShapeFunction<T>,
    theta_s0: &[T],
    theta_i0: &IntensityParams<T>,
    config: &FitConfig<T>,
) -> Result<FitResult<T>> {
    config.validate()?;
    check_image(image)?;
    theta_i0.validate()?;
    let bounds = shape.parameter_bounds();
    check_in_bounds(theta_s0, &bounds)?;
    let l_ref = ReferenceLength::new(config.l_ref)?;
    let points = image.grid.positions();

    let mut theta = theta_s0.to_vec();
    let mut intensity = theta_i0.clone();
    let mut ll = ClassLogLikelihoods::compute(&image.data, &intensity)?;
    let mut scaled = scale_values(&shape.evaluate_points(&theta, &points)?, l_ref)?;
    let mut lj = log_joint_from(&ll, &scaled);
    let mut trace = vec![trace_row(0, lj, &theta, 0.0, &intensity, 0, MsReport::default())];
    let (mut lo, mut hi) = (lj.as_f64(), lj.as_f64());
    let mut mi_reports = Vec::new();
    let mut covariance = None;

    for iteration in 1..=config.max_iterations {
        let u = responsibilities(&ll, &scaled)?;
        let problem = MsProblem {
            shape,
            points: &points,
            likelihoods: Some(&ll),
            l_ref,
            prior: &config.shape_prior,
            fd_steps: config.fd_steps.as_deref(),
            options: config.ms,
        };
        let ms = ms_step(&problem, &u, &theta)?;
        theta = ms.posterior.theta.clone();
        covariance = Some(ms.posterior.covariance.clone());
        scaled = scale_values(&shape.evaluate_points(&theta, &points)?, l_ref)?;
        let u = responsibilities(&ll, &scaled)?;
        let (next, mi) = crate::appearance::mi_step(&image.data, &u, &intensity, &config.mi)?;
        let change = relative_change(&next.foreground_vector(), &intensity.foreground_vector());
        intensity = next;
        ll = ClassLogLikelihoods::compute(&image.data, &intensity)?;
        let lj_new = log_joint_from(&ll, &scaled);

        let drop = lj.as_f64() - lj_new.as_f64();
        lo = lo.min(lj_new.as_f64());
        hi = hi.max(lj_new.as_f64());
        if drop > 0.0 && drop > config.divergence_fraction.as_f64() * (hi - lo) && hi > lo {
            return Err(Error::Diverged(format!(
                "log-joint fell from {lj} to {lj_new} at iteration {iteration}"
            )));
        }
        lj = lj_new;
        let rounds = mi.rounds;
        mi_reports.push(mi);
        let step_norm = ms.report.step_norm;
        trace.push(trace_row(
            iteration, lj, &theta, step_norm, &intensity, rounds, ms.report,
        ));
        debug!("iteration {iteration}: log-joint {lj}, intensity change {change}");
        if change < config.epsilon_outer {
            break;
        }
    }

    let covariance = covariance.expect("at least one iteration");
    let u = responsibilities(&ll, &scaled)?;
    let prior_data: Vec<T> = scaled.iter().map(|&v| sigmoid(v)).collect();
    let values: Vec<T> = scaled.iter().map(|&v| v * l_ref.get()).collect();
    let ssi = BinaryMask::new(image.grid.clone(), values.iter().map(|&s| s >= T::zero()).collect())?;
    let hard = ReferenceLength::new(config.l_ref_hard.unwrap_or(config.l_ref))?;
    let u_hard = responsibilities(&ll, &scale_values(&values, hard)?)?;
    let sroi = BinaryMask::new(image.grid.clone(), u_hard.iter().map(|&v| v >= T::half()).collect())?;
    Ok(FitResult {
        posterior: ShapePosterior {
            names: shape.parameter_names(),
            theta,
            covariance,
            bounds,
        },
        intensity,
        responsibilities: ResponsibilityField::new(Volume::new(image.grid.clone(), u)?)?,
        prior: Volume::new(image.grid.clone(), prior_data)?,
        sroi,
        ssi,
        log_joint: lj,
        trace,
        mi_reports,
    })
}

/// Trace as CSV: iteration, log_joint, each θ_S entry, step_norm, then
/// foreground μ and σ per component.
pub fn trace_csv(names: &[String], trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,log_joint");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",step_norm");
    let m = trace.first().map_or(0, |r| r.fg_mu.len());
    for j in 0..m {
        out.push_str(&format!(",fg_mu_{j},fg_sigma_{j}"));
    }
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{},{:?}", r.iteration, r.log_joint));
        for v in &r.theta_s {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{:?}", r.step_norm));
        for (mu, s) in r.fg_mu.iter().zip(&r.fg_sigma) {
            out.push_str(&format!(",{mu:?},{s:?}"));
        }
        out.push('\n');
    }
    out
}
