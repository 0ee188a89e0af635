//! Shape functions and the logistic shape prior.
//!
//! A shape function maps parameters and a point to a scalar that is positive
//! inside the shape, negative outside and zero on its boundary. The prior
//! probability that a voxel is foreground is the sigmoid of that value scaled
//! by a reference length.

mod analytic;
mod rigid;

pub use analytic::{CircleShape, EllipsePhantom, OffsetShape, PlaneShape};
pub use rigid::{
    rigid_gradient, rigid_gradient_from_spatial, rotation_jacobian, rotation_matrix, skew, LocalSample, LocalShape,
    PreparedShape, RigidBounds, RigidShape, SMALL_ANGLE,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::volume::{Grid, Point3, Volume};

/// Closed interval a parameter must stay in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Bound<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if !(lo <= hi) {
            return Err(invalid("bound", format!("lower {lo} exceeds upper {hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> T {
        self.hi - self.lo
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: T) -> T {
        v.max(self.lo).min(self.hi)
    }
}

/// Where the rotation vector and translation live in a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RigidSplit {
    pub deformable: usize,
    pub rotation: usize,
    pub translation: usize,
}

/// Strictly positive sigmoid slope length, in the units of the shape function.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceLength<T>(T);

impl<T: Real> ReferenceLength<T> {
    pub fn new(value: T) -> Result<Self> {
        if !(value > T::zero()) || !value.is_finite() {
            return Err(invalid("l_ref", format!("must be finite and > 0, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn get(self) -> T {
        self.0
    }
}

pub trait ShapeFunction<T: Real>: Send + Sync {
    fn parameter_count(&self) -> usize;

    fn parameter_bounds(&self) -> Vec<Bound<T>>;

    fn parameter_names(&self) -> Vec<String>;

    fn rigid_split(&self) -> Option<RigidSplit> {
        None
    }

    fn evaluate(&self, params: &[T], x: &Point3<T>) -> Result<T>;

    /// Shape values at every point, in input order.
    fn evaluate_points(&self, params: &[T], points: &[Point3<T>]) -> Result<Vec<T>> {
        points
            .par_iter()
            .enumerate()
            .map(|(n, x)| self.evaluate(params, x).map_err(|e| at_voxel(n, e)))
            .collect()
    }

    /// Shape values and parameter gradients at every point.
    ///
    /// Gradients are returned row-major, one row of `parameter_count()`
    /// entries per point. `steps` are the finite-difference increments for
    /// parameters that have no analytic derivative.
    fn gradient_points(&self, params: &[T], points: &[Point3<T>], steps: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let p = self.parameter_count();
        let rows: Vec<(T, Vec<T>)> = points
            .par_iter()
            .enumerate()
            .map(|(n, x)| {
                let v = self.evaluate(params, x).map_err(|e| at_voxel(n, e))?;
                let g = fd_gradient(self, params, x, steps).map_err(|e| at_voxel(n, e))?;
                Ok((v, g))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(rows.len());
        let mut grads = Vec::with_capacity(rows.len() * p);
        for (v, g) in rows {
            values.push(v);
            grads.extend_from_slice(&g);
        }
        Ok((values, grads))
    }
}

pub(crate) fn at_voxel(index: usize, source: Error) -> Error {
    Error::AtVoxel {
        index,
        source: Box::new(source),
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow: `-softplus(-x)`.
#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Foreground prior probability `σ(s / l_ref)` of a voxel with shape value `s`.
pub fn logistic_prior<T: Real>(s: T, l_ref: ReferenceLength<T>) -> Result<T> {
    if s.is_nan() {
        return Err(Error::NonFinite("shape value"));
    }
    if s.is_infinite() {
        return Ok(if s > T::zero() { T::one() } else { T::zero() });
    }
    Ok(sigmoid(s / l_ref.get()))
}

/// Expected posterior label probability at normalized signed distance `delta`
/// when the appearance evidence is uniform on [0, 1].
pub fn expected_posterior<T: Real>(delta: T) -> T {
    if delta.is_nan() {
        return delta;
    }
    if delta < T::zero() {
        return T::one() - expected_posterior(-delta);
    }
    if delta < T::lit(1e-3) {
        let d2 = delta * delta;
        return T::half() + delta / T::lit(6.0) - delta * d2 / T::lit(180.0);
    }
    // (1 - Δe^{-Δ} - e^{-Δ}) / (1 - e^{-Δ})², with 1 - e^{-Δ} = -expm1(-Δ)
    let x = (-delta).exp();
    let one_minus_x = -(-delta).exp_m1();
    (one_minus_x - delta * x) / (one_minus_x * one_minus_x)
}

/// Default finite-difference increments: a fixed fraction of each bound width.
pub fn default_fd_steps<T: Real>(bounds: &[Bound<T>]) -> Vec<T> {
    bounds
        .iter()
        .map(|b| {
            let w = b.width();
            if w > T::zero() {
                w * T::lit(1e-3)
            } else {
                T::lit(1e-6)
            }
        })
        .collect()
}

/// Central-difference gradient of the shape value with respect to every parameter.
///
/// Increments that would leave a parameter's bounds are shortened on that
/// side, giving an asymmetric difference quotient.
pub fn fd_gradient<T: Real, S: ShapeFunction<T> + ?Sized>(
    shape: &S,
    params: &[T],
    x: &Point3<T>,
    steps: &[T],
) -> Result<Vec<T>> {
    let p = shape.parameter_count();
    if params.len() != p || steps.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "shape has {p} parameters, got {} values and {} steps",
            params.len(),
            steps.len()
        )));
    }
    if let Some(bad) = steps.iter().find(|&&d| !(d > T::zero())) {
        return Err(invalid(
            "delta",
            format!("finite-difference step must be > 0, got {bad}"),
        ));
    }
    let bounds = shape.parameter_bounds();
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(p);
    for i in 0..p {
        let (up, down) = clipped_steps(params[i], steps[i], &bounds[i]);
        if up + down == T::zero() {
            grad.push(T::zero());
            continue;
        }
        probe[i] = params[i] + up;
        let fp = shape.evaluate(&probe, x)?;
        probe[i] = params[i] - down;
        let fm = shape.evaluate(&probe, x)?;
        probe[i] = params[i];
        grad.push((fp - fm) / (up + down));
    }
    Ok(grad)
}

pub(crate) fn clipped_steps<T: Real>(value: T, step: T, bound: &Bound<T>) -> (T, T) {
    let up = step.min(bound.hi - value).max(T::zero());
    let down = step.min(value - bound.lo).max(T::zero());
    (up, down)
}

/// Foreground prior probability at every voxel of `grid`.
pub fn prior_field<T: Real, S: ShapeFunction<T> + ?Sized>(
    shape: &S,
    params: &[T],
    grid: &Grid<T>,
    l_ref: ReferenceLength<T>,
) -> Result<Volume<T>> {
    let values = shape.evaluate_points(params, &grid.positions())?;
    let data = values
        .into_par_iter()
        .enumerate()
        .map(|(n, s)| logistic_prior(s, l_ref).map_err(|e| at_voxel(n, e)))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(grid.clone(), data)
}

/// Checks that every parameter lies inside its bound.
pub fn check_in_bounds<T: Real>(params: &[T], bounds: &[Bound<T>]) -> Result<()> {
    if params.len() != bounds.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters for {} bounds",
            params.len(),
            bounds.len()
        )));
    }
    for (i, (&v, b)) in params.iter().zip(bounds).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite("shape parameter"));
        }
        if !b.contains(v) {
            return Err(invalid(
                "theta_s",
                format!("parameter {i} = {v} outside [{}, {}]", b.lo, b.hi),
            ));
        }
    }
    Ok(())
}

pub fn clamp_to_bounds<T: Real>(params: &mut [T], bounds: &[Bound<T>]) -> usize {
    let mut clipped = 0;
    for (v, b) in params.iter_mut().zip(bounds) {
        let c = b.clamp(*v);
        if c != *v {
            clipped += 1;
            *v = c;
        }
    }
    clipped
}
