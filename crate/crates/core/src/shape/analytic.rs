use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Bound, LocalSample, LocalShape, PreparedShape, ShapeFunction};
use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::volume::Point3;

/// Circle in the xy-plane, `S̃ = R² − ‖x − C‖²` (positive inside), with
/// parameters `[cx, cy, R]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleShape<T> {
    pub bounds: [Bound<T>; 3],
}

impl<T: Real> CircleShape<T> {
    pub fn new(bounds: [Bound<T>; 3]) -> Result<Self> {
        if !(bounds[2].lo > T::zero()) {
            return Err(invalid("radius bound", "lower radius bound must be > 0"));
        }
        Ok(Self { bounds })
    }

    /// Centre anywhere in the unit square, radius in [0.01, 0.75].
    pub fn unit_square() -> Self {
        let (z, o) = (T::zero(), T::one());
        Self {
            bounds: [
                Bound { lo: z, hi: o },
                Bound { lo: z, hi: o },
                Bound {
                    lo: T::lit(0.01),
                    hi: T::lit(0.75),
                },
            ],
        }
    }

    #[inline]
    fn value(params: &[T], x: &Point3<T>) -> T {
        let dx = x[0] - params[0];
        let dy = x[1] - params[1];
        params[2] * params[2] - dx * dx - dy * dy
    }

    pub fn area(params: &[T]) -> T {
        T::PI() * params[2] * params[2]
    }
}

impl<T: Real> ShapeFunction<T> for CircleShape<T> {
    fn parameter_count(&self) -> usize {
        3
    }

    fn parameter_bounds(&self) -> Vec<Bound<T>> {
        self.bounds.to_vec()
    }

    fn parameter_names(&self) -> Vec<String> {
        vec!["cx".into(), "cy".into(), "radius".into()]
    }

    fn evaluate(&self, params: &[T], x: &Point3<T>) -> Result<T> {
        if params.len() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "circle takes 3 parameters, got {}",
                params.len()
            )));
        }
        let v = Self::value(params, x);
        if !v.is_finite() {
            return Err(Error::NonFinite("circle shape value"));
        }
        Ok(v)
    }

    fn gradient_points(&self, params: &[T], points: &[Point3<T>], _steps: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if params.len() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "circle takes 3 parameters, got {}",
                params.len()
            )));
        }
        let two = T::two();
        let values = points.par_iter().map(|x| Self::value(params, x)).collect();
        let grads = points
            .par_iter()
            .flat_map_iter(|x| [two * (x[0] - params[0]), two * (x[1] - params[1]), two * params[2]])
            .collect();
        Ok((values, grads))
    }
}

/// Ground-truth ellipse for synthetic phantoms (never fitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsePhantom<T> {
    pub center: [T; 2],
    pub semi_axes: [T; 2],
    /// Rotation of the first semi-axis from the x axis, rad.
    pub angle: T,
}

impl<T: Real> EllipsePhantom<T> {
    pub fn new(center: [T; 2], semi_axes: [T; 2], angle: T) -> Result<Self> {
        if semi_axes.iter().any(|&a| !(a > T::zero())) {
            return Err(invalid("semi_axes", "semi-axes must be > 0"));
        }
        Ok(Self {
            center,
            semi_axes,
            angle,
        })
    }

    /// `1 − (u/a)² − (v/b)²` in the ellipse frame; positive inside.
    pub fn value(&self, x: &Point3<T>) -> T {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        T::one() - u * u - v * v
    }

    pub fn contains(&self, x: &Point3<T>) -> bool {
        self.value(x) >= T::zero()
    }

    pub fn area(&self) -> T {
        T::PI() * self.semi_axes[0] * self.semi_axes[1]
    }
}

/// Plane `S̃ = n·x + θ₀` with the single parameter `θ₀` (an offset).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetShape<T> {
    pub direction: [T; 3],
    pub bound: Bound<T>,
}

impl<T: Real> OffsetShape<T> {
    pub fn new(direction: [T; 3], bound: Bound<T>) -> Self {
        Self { direction, bound }
    }
}

impl<T: Real> ShapeFunction<T> for OffsetShape<T> {
    fn parameter_count(&self) -> usize {
        1
    }

    fn parameter_bounds(&self) -> Vec<Bound<T>> {
        vec![self.bound]
    }

    fn parameter_names(&self) -> Vec<String> {
        vec!["offset".into()]
    }

    fn evaluate(&self, params: &[T], x: &Point3<T>) -> Result<T> {
        let d = &self.direction;
        Ok(d[0] * x[0] + d[1] * x[1] + d[2] * x[2] + params[0])
    }

    fn gradient_points(&self, params: &[T], points: &[Point3<T>], _steps: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let values = points.iter().map(|x| self.evaluate(params, x)).collect::<Result<_>>()?;
        Ok((values, vec![T::one(); points.len()]))
    }
}

/// Fixed plane `S̃(y) = n·y + d` in a local frame; no deformable parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneShape<T> {
    pub normal: [T; 3],
    pub offset: T,
}

impl<T: Real> PreparedShape<T> for PlaneShape<T> {
    fn value(&self, y: &Point3<T>) -> Result<T> {
        let n = &self.normal;
        Ok(n[0] * y[0] + n[1] * y[1] + n[2] * y[2] + self.offset)
    }

    fn sample(&self, y: &Point3<T>) -> Result<LocalSample<T>> {
        Ok(LocalSample {
            value: self.value(y)?,
            gradient: self.normal,
            anchor: None,
        })
    }
}

impl<T: Real> LocalShape<T> for PlaneShape<T> {
    type Prepared = PlaneShape<T>;

    fn deformable_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn deformable_bounds(&self) -> Vec<Bound<T>> {
        Vec::new()
    }

    fn prepare(&self, _deformable: &[T]) -> Result<Self::Prepared> {
        Ok(*self)
    }
}
