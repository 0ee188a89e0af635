//! Shapes posed by a rigid transform `y = R(r) x + t`.
//!
//! The parameter vector of a [`RigidShape`] is laid out as
//! `[deformable..., rx, ry, rz, tx, ty, tz]`. Gradients with respect to the
//! pose are analytic given the spatial gradient of the local shape; the
//! deformable block uses central finite differences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{at_voxel, clipped_steps, Bound, RigidSplit, ShapeFunction};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Point3;

/// Below this rotation angle (rad) the rotation gradient uses its series form.
pub const SMALL_ANGLE: f64 = 1e-4;

type Mat3<T> = [[T; 3]; 3];

/// Value, spatial gradient and an optional anchor for warm-started re-evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSample<T> {
    pub value: T,
    pub gradient: [T; 3],
    pub anchor: Option<T>,
}

/// A shape function in its own frame with its deformable parameters fixed.
pub trait PreparedShape<T: Real>: Send + Sync {
    fn value(&self, y: &Point3<T>) -> Result<T>;

    /// Value and spatial gradient; the default uses central differences.
    fn sample(&self, y: &Point3<T>) -> Result<LocalSample<T>> {
        let value = self.value(y)?;
        let mut gradient = [T::zero(); 3];
        let rel = T::epsilon().cbrt();
        for a in 0..3 {
            let h = rel * T::one().max(y[a].abs());
            let mut p = *y;
            p[a] = y[a] + h;
            let fp = self.value(&p)?;
            p[a] = y[a] - h;
            let fm = self.value(&p)?;
            gradient[a] = (fp - fm) / (h + h);
        }
        Ok(LocalSample {
            value,
            gradient,
            anchor: None,
        })
    }

    /// Value at `y`, optionally reusing the anchor of a nearby evaluation.
    fn value_near(&self, y: &Point3<T>, _anchor: Option<T>) -> Result<T> {
        self.value(y)
    }
}

/// A deformable shape defined in a local frame.
pub trait LocalShape<T: Real>: Send + Sync {
    type Prepared: PreparedShape<T>;

    fn deformable_names(&self) -> Vec<String>;

    fn deformable_bounds(&self) -> Vec<Bound<T>>;

    fn prepare(&self, deformable: &[T]) -> Result<Self::Prepared>;
}

/// Per-axis bounds for the rotation vector (rad) and translation (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBounds<T> {
    pub rotation: [Bound<T>; 3],
    pub translation: [Bound<T>; 3],
}

impl<T: Real> RigidBounds<T> {
    pub fn symmetric(max_angle: T, max_shift: T) -> Self {
        let r = Bound {
            lo: -max_angle,
            hi: max_angle,
        };
        let t = Bound {
            lo: -max_shift,
            hi: max_shift,
        };
        Self {
            rotation: [r; 3],
            translation: [t; 3],
        }
    }
}

impl<T: Real> Default for RigidBounds<T> {
    fn default() -> Self {
        Self::symmetric(T::FRAC_PI_4(), T::lit(3.0))
    }
}

pub fn skew<T: Real>(v: &[T; 3]) -> Mat3<T> {
    let z = T::zero();
    [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
}

fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec<T: Real>(a: &Mat3<T>, v: &[T; 3]) -> [T; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut t = *a;
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rodrigues' formula for the rotation vector `r`.
pub fn rotation_matrix<T: Real>(r: &[T; 3]) -> Mat3<T> {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < T::lit(SMALL_ANGLE) {
        (T::one() - theta2 / T::lit(6.0), T::half() - theta2 / T::lit(24.0))
    } else {
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let mut out = identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Jacobian `∂(R(r) x) / ∂r`; column `j` is the derivative along `r_j`.
///
/// Uses `-R S_x (r rᵀ + (Rᵀ - I) S_r) / ‖r‖²`, switching to the series
/// `-R S_x (I - S_r / 2 + S_r² / 6)` when `‖r‖ < SMALL_ANGLE`.
pub fn rotation_jacobian<T: Real>(r: &[T; 3], x: &[T; 3]) -> Mat3<T> {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    jacobian_branch(r, x, theta < T::lit(SMALL_ANGLE))
}

fn jacobian_branch<T: Real>(r: &[T; 3], x: &[T; 3], series: bool) -> Mat3<T> {
    let rot = rotation_matrix(r);
    let sx = skew(x);
    let sr = skew(r);
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let inner = if series {
        let sr2 = mat_mul(&sr, &sr);
        let mut m = identity();
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += sr2[i][j] / T::lit(6.0) - T::half() * sr[i][j];
            }
        }
        m
    } else {
        let mut rt_minus_i = transpose(&rot);
        for (i, row) in rt_minus_i.iter_mut().enumerate() {
            row[i] -= T::one();
        }
        let tail = mat_mul(&rt_minus_i, &sr);
        let mut m = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (r[i] * r[j] + tail[i][j]) / theta2;
            }
        }
        m
    };
    let mut out = mat_mul(&mat_mul(&rot, &sx), &inner);
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
    out
}

/// Pose gradient `[∇_r, ∇_t]` from the spatial gradient at `y = R x + t`.
pub fn rigid_gradient_from_spatial<T: Real>(spatial: &[T; 3], r: &[T; 3], x: &[T; 3]) -> [T; 6] {
    let jac = rotation_jacobian(r, x);
    let rot = mat_vec(&transpose(&jac), spatial);
    [rot[0], rot[1], rot[2], spatial[0], spatial[1], spatial[2]]
}

/// Pose gradient of `S̃(θ_SD, R x + t)` at `x`: rotation block then translation block.
pub fn rigid_gradient<T: Real, S: LocalShape<T>>(
    shape: &S,
    deformable: &[T],
    r: &[T; 3],
    t: &[T; 3],
    x: &Point3<T>,
) -> Result<[T; 6]> {
    let prepared = shape.prepare(deformable)?;
    let y = transform(&rotation_matrix(r), t, x);
    let sample = prepared.sample(&y)?;
    Ok(rigid_gradient_from_spatial(&sample.gradient, r, x))
}

#[inline]
fn transform<T: Real>(rot: &Mat3<T>, t: &[T; 3], x: &Point3<T>) -> Point3<T> {
    let y = mat_vec(rot, x);
    [y[0] + t[0], y[1] + t[1], y[2] + t[2]]
}

/// A local shape placed in the image by a rigid transform.
#[derive(Debug, Clone)]
pub struct RigidShape<S, T> {
    pub local: S,
    pub rigid_bounds: RigidBounds<T>,
}

impl<T: Real, S: LocalShape<T>> RigidShape<S, T> {
    pub fn new(local: S, rigid_bounds: RigidBounds<T>) -> Self {
        Self { local, rigid_bounds }
    }

    fn deformable_count(&self) -> usize {
        self.local.deformable_bounds().len()
    }

    fn split<'a>(&self, params: &'a [T]) -> Result<(&'a [T], [T; 3], [T; 3])> {
        let nd = self.deformable_count();
        if params.len() != nd + 6 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} shape parameters, got {}",
                nd + 6,
                params.len()
            )));
        }
        let r = [params[nd], params[nd + 1], params[nd + 2]];
        let t = [params[nd + 3], params[nd + 4], params[nd + 5]];
        Ok((&params[..nd], r, t))
    }
}

impl<T: Real, S: LocalShape<T>> ShapeFunction<T> for RigidShape<S, T> {
    fn parameter_count(&self) -> usize {
        self.deformable_count() + 6
    }

    fn parameter_bounds(&self) -> Vec<Bound<T>> {
        let mut b = self.local.deformable_bounds();
        b.extend_from_slice(&self.rigid_bounds.rotation);
        b.extend_from_slice(&self.rigid_bounds.translation);
        b
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut n = self.local.deformable_names();
        n.extend(["rx", "ry", "rz", "tx", "ty", "tz"].map(String::from));
        n
    }

    fn rigid_split(&self) -> Option<RigidSplit> {
        let nd = self.deformable_count();
        Some(RigidSplit {
            deformable: nd,
            rotation: nd,
            translation: nd + 3,
        })
    }

    fn evaluate(&self, params: &[T], x: &Point3<T>) -> Result<T> {
        let (def, r, t) = self.split(params)?;
        let prepared = self.local.prepare(def)?;
        prepared.value(&transform(&rotation_matrix(&r), &t, x))
    }

    fn evaluate_points(&self, params: &[T], points: &[Point3<T>]) -> Result<Vec<T>> {
        let (def, r, t) = self.split(params)?;
        let prepared = self.local.prepare(def)?;
        let rot = rotation_matrix(&r);
        points
            .par_iter()
            .enumerate()
            .map(|(n, x)| prepared.value(&transform(&rot, &t, x)).map_err(|e| at_voxel(n, e)))
            .collect()
    }

    fn gradient_points(&self, params: &[T], points: &[Point3<T>], steps: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let (def, r, t) = self.split(params)?;
        let nd = def.len();
        let p = nd + 6;
        if steps.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} finite-difference steps for {p} parameters",
                steps.len()
            )));
        }
        if let Some(bad) = steps[..nd].iter().find(|&&d| !(d > T::zero())) {
            return Err(crate::error::invalid(
                "delta",
                format!("finite-difference step must be > 0, got {bad}"),
            ));
        }
        let bounds = self.local.deformable_bounds();
        let prepared = self.local.prepare(def)?;
        let mut perturbed = Vec::with_capacity(nd);
        for i in 0..nd {
            let (up, down) = clipped_steps(def[i], steps[i], &bounds[i]);
            let mut plus = def.to_vec();
            plus[i] = def[i] + up;
            let mut minus = def.to_vec();
            minus[i] = def[i] - down;
            perturbed.push((self.local.prepare(&plus)?, self.local.prepare(&minus)?, up + down));
        }
        let rot = rotation_matrix(&r);
        let rows: Vec<(T, Vec<T>)> = points
            .par_iter()
            .enumerate()
            .map(|(n, x)| {
                let y = transform(&rot, &t, x);
                let sample = prepared.sample(&y).map_err(|e| at_voxel(n, e))?;
                let mut row = vec![T::zero(); p];
                for (i, (plus, minus, span)) in perturbed.iter().enumerate() {
                    if *span == T::zero() {
                        continue;
                    }
                    let fp = plus.value_near(&y, sample.anchor).map_err(|e| at_voxel(n, e))?;
                    let fm = minus.value_near(&y, sample.anchor).map_err(|e| at_voxel(n, e))?;
                    row[i] = (fp - fm) / *span;
                }
                row[nd..].copy_from_slice(&rigid_gradient_from_spatial(&sample.gradient, &r, x));
                Ok((sample.value, row))
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
