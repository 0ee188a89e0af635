//! Parametric cochlea: a generalized cylinder swept along a spiral centerline.
//!
//! The centerline is given in cylindrical coordinates by a radial component
//! `r(θ)` (quadratic up to `θ₀`, then the log-spiral `a e^{-bθ}`) and a
//! longitudinal component `z(θ)` (damped sinusoid plus linear rise, then a
//! quadratic that flattens the last half turn). The four deformable
//! parameters are `[a, b, α, φ]`; with the rigid pose this gives ten.
//!
//! The shape function is `ρ(θ*) − ‖y − c(θ*)‖` where `c(θ*)` is the centerline
//! point nearest to `y` and `ρ` the cross-section radius there.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::shape::{Bound, LocalSample, LocalShape, PreparedShape, RigidBounds, RigidShape, ShapeFunction};
use crate::volume::{Grid, Point3, Volume};

pub const THETA_0: f64 = 5.0 * std::f64::consts::PI / 6.0;
pub const P_0: f64 = 5.0;
pub const BETA: f64 = 0.2;
pub const Q_1: f64 = 0.225;

/// Deformable parameters used to initialise every fit: `a, b, α, φ`.
pub const DEFAULT_INIT: [f64; 4] = [4.0, 0.15, 0.6, 0.2];

pub const PARAMETER_NAMES: [&str; 4] = ["a", "b", "alpha", "phi"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CochleaDeformableParams<T> {
    /// Log-spiral amplitude, mm.
    pub a: T,
    /// Log-spiral decay, rad⁻¹.
    pub b: T,
    /// Longitudinal sinusoid amplitude, mm.
    pub alpha: T,
    /// Longitudinal phase, rad.
    pub phi: T,
}

impl<T: Real> CochleaDeformableParams<T> {
    pub fn from_slice(v: &[T]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::DimensionMismatch(format!(
                "cochlea has 4 deformable parameters, got {}",
                v.len()
            )));
        }
        let p = Self {
            a: v[0],
            b: v[1],
            alpha: v[2],
            phi: v[3],
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cochlea parameters"));
        }
        if !(p.a > T::zero()) || !(p.b > T::zero()) {
            return Err(invalid("a, b", "radial parameters must be > 0"));
        }
        Ok(p)
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.a, self.b, self.alpha, self.phi]
    }
}

impl<T: Real> Default for CochleaDeformableParams<T> {
    fn default() -> Self {
        Self {
            a: T::lit(DEFAULT_INIT[0]),
            b: T::lit(DEFAULT_INIT[1]),
            alpha: T::lit(DEFAULT_INIT[2]),
            phi: T::lit(DEFAULT_INIT[3]),
        }
    }
}

/// Tube radius tapering linearly from the base (θ = 0) to the apex (θ = θ_max).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionProfile<T> {
    pub base_radius: T,
    pub apex_radius: T,
}

impl<T: Real> CrossSectionProfile<T> {
    #[inline]
    pub fn radius(&self, theta: T, theta_max: T) -> T {
        self.base_radius + (self.apex_radius - self.base_radius) * theta / theta_max
    }

    #[inline]
    pub fn slope(&self, theta_max: T) -> T {
        (self.apex_radius - self.base_radius) / theta_max
    }
}

impl<T: Real> Default for CrossSectionProfile<T> {
    fn default() -> Self {
        Self {
            base_radius: T::one(),
            apex_radius: T::lit(0.4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CochleaBounds<T> {
    pub a: Bound<T>,
    pub b: Bound<T>,
    pub alpha: Bound<T>,
    pub phi: Bound<T>,
}

impl<T: Real> Default for CochleaBounds<T> {
    fn default() -> Self {
        let b = |lo: f64, hi: f64| Bound {
            lo: T::lit(lo),
            hi: T::lit(hi),
        };
        Self {
            a: b(2.0, 7.0),
            b: b(0.05, 0.4),
            alpha: b(0.1, 2.0),
            phi: Bound {
                lo: -T::PI(),
                hi: T::PI(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct CochleaConfig<T> {
    /// Total angular extent of the centerline, rad.
    pub theta_max: T,
    pub cross_section: CrossSectionProfile<T>,
    pub bounds: CochleaBounds<T>,
    pub rigid_bounds: RigidBounds<T>,
    /// Uniform samples used to bracket the nearest centerline point.
    pub coarse_samples: usize,
}

impl<T: Real> Default for CochleaConfig<T> {
    fn default() -> Self {
        Self {
            theta_max: T::lit(5.0) * T::PI(),
            cross_section: CrossSectionProfile::default(),
            bounds: CochleaBounds::default(),
            rigid_bounds: RigidBounds::default(),
            coarse_samples: 512,
        }
    }
}

impl<T: Real> CochleaConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let fixed = FixedConstants::new(self.theta_max)?;
        let cs = &self.cross_section;
        let r_end = cs.radius(fixed.theta_max, fixed.theta_max);
        if !(cs.base_radius > T::zero()) || !(r_end > T::zero()) {
            return Err(invalid("cross_section", "radius must stay > 0 along the centerline"));
        }
        if self.coarse_samples < 3 {
            return Err(invalid("coarse_samples", "need at least 3 samples"));
        }
        Ok(())
    }
}

/// Constants of the centerline that no parameter controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedConstants<T> {
    pub theta0: T,
    pub p0: T,
    pub beta: T,
    pub q1: T,
    pub theta_max: T,
    pub theta1: T,
}

impl<T: Real> FixedConstants<T> {
    pub fn new(theta_max: T) -> Result<Self> {
        let theta0 = T::lit(THETA_0);
        if !(theta_max > theta0 + T::PI()) {
            return Err(invalid(
                "theta_max",
                format!(
                    "must exceed θ₀ + π = {}, got {theta_max}",
                    THETA_0 + std::f64::consts::PI
                ),
            ));
        }
        Ok(Self {
            theta0,
            p0: T::lit(P_0),
            beta: T::lit(BETA),
            q1: T::lit(Q_1),
            theta_max,
            theta1: theta_max - T::PI(),
        })
    }
}

/// Polynomial coefficients that make the centerline continuously differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityConstants<T> {
    pub p2: T,
    pub p1: T,
    pub c1: T,
    pub c2: T,
    pub a2: T,
    pub a1: T,
    pub a0: T,
}

impl<T: Real> ContinuityConstants<T> {
    pub fn new(p: &CochleaDeformableParams<T>, f: &FixedConstants<T>) -> Self {
        let t0 = f.theta0;
        // value and slope of the log-spiral at θ₀
        let c2 = p.a * (-p.b * t0).exp();
        let c1 = -c2 * p.b;
        // r(θ₀) = C₂ and r'(θ₀) = C₁ for the quadratic p₂θ² + p₁θ + p₀
        let p2 = (c1 * t0 - c2 + f.p0) / (t0 * t0);
        let p1 = (T::two() * c2 - c1 * t0 - T::two() * f.p0) / t0;

        // z(θ₁) and z'(θ₁) of the damped sinusoid; the quadratic matches both
        // and has zero slope at θ_max
        let t1 = f.theta1;
        let (z1, dz1, _) = sinusoid_branch(p, f, t1);
        let a2 = dz1 / (T::two() * (t1 - f.theta_max));
        let a1 = -T::two() * a2 * f.theta_max;
        let a0 = z1 - a2 * t1 * t1 - a1 * t1;
        Self {
            p2,
            p1,
            c1,
            c2,
            a2,
            a1,
            a0,
        }
    }
}

#[inline]
fn sinusoid_branch<T: Real>(p: &CochleaDeformableParams<T>, f: &FixedConstants<T>, theta: T) -> (T, T, T) {
    let damp = p.alpha * (-f.beta * theta).exp();
    let (s, c) = (theta + p.phi).sin_cos();
    let z = damp * c + f.q1 * theta;
    let dz = damp * (-f.beta * c - s) + f.q1;
    let ddz = damp * (f.beta * f.beta * c + T::two() * f.beta * s - c);
    (z, dz, ddz)
}

/// The centerline for one set of deformable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline<T> {
    pub params: CochleaDeformableParams<T>,
    pub fixed: FixedConstants<T>,
    pub continuity: ContinuityConstants<T>,
}

impl<T: Real> Centerline<T> {
    pub fn new(params: CochleaDeformableParams<T>, theta_max: T) -> Result<Self> {
        let fixed = FixedConstants::new(theta_max)?;
        let continuity = ContinuityConstants::new(&params, &fixed);
        Ok(Self {
            params,
            fixed,
            continuity,
        })
    }

    fn check_range(&self, theta: T) -> Result<()> {
        if !(theta >= T::zero() && theta <= self.fixed.theta_max) {
            return Err(Error::CurveParameterOutOfRange {
                value: theta.as_f64(),
                max: self.fixed.theta_max.as_f64(),
            });
        }
        Ok(())
    }

    pub fn radial(&self, theta: T) -> Result<T> {
        self.check_range(theta)?;
        Ok(self.radial_derivs(theta).0)
    }

    pub fn longitudinal(&self, theta: T) -> Result<T> {
        self.check_range(theta)?;
        Ok(self.longitudinal_derivs(theta).0)
    }

    /// `(r, r', r'')` at `theta` (no range check).
    #[inline]
    pub fn radial_derivs(&self, theta: T) -> (T, T, T) {
        let k = &self.continuity;
        if theta < self.fixed.theta0 {
            (
                (k.p2 * theta + k.p1) * theta + self.fixed.p0,
                T::two() * k.p2 * theta + k.p1,
                T::two() * k.p2,
            )
        } else {
            let e = self.params.a * (-self.params.b * theta).exp();
            let b = self.params.b;
            (e, -b * e, b * b * e)
        }
    }

    /// `(z, z', z'')` at `theta` (no range check).
    #[inline]
    pub fn longitudinal_derivs(&self, theta: T) -> (T, T, T) {
        if theta < self.fixed.theta1 {
            sinusoid_branch(&self.params, &self.fixed, theta)
        } else {
            let k = &self.continuity;
            (
                (k.a2 * theta + k.a1) * theta + k.a0,
                T::two() * k.a2 * theta + k.a1,
                T::two() * k.a2,
            )
        }
    }

    #[inline]
    pub fn point(&self, theta: T) -> Point3<T> {
        let (r, _, _) = self.radial_derivs(theta);
        let (z, _, _) = self.longitudinal_derivs(theta);
        let (s, c) = theta.sin_cos();
        [r * c, r * s, z]
    }

    /// Position, first and second derivative with respect to θ.
    #[inline]
    pub fn point_derivs(&self, theta: T) -> [Point3<T>; 3] {
        let (r, dr, ddr) = self.radial_derivs(theta);
        let (z, dz, ddz) = self.longitudinal_derivs(theta);
        let (s, c) = theta.sin_cos();
        let two = T::two();
        [
            [r * c, r * s, z],
            [dr * c - r * s, dr * s + r * c, dz],
            [ddr * c - two * dr * s - r * c, ddr * s + two * dr * c - r * s, ddz],
        ]
    }

    /// `n` points sampled uniformly in θ over `[0, θ_max]`.
    pub fn sample(&self, n: usize) -> Result<Vec<Point3<T>>> {
        if n < 2 {
            return Err(invalid("n_samples", "need at least 2 samples"));
        }
        let step = self.fixed.theta_max / T::lit((n - 1) as f64);
        Ok((0..n)
            .map(|i| {
                let theta = if i == n - 1 {
                    self.fixed.theta_max
                } else {
                    step * T::lit(i as f64)
                };
                self.point(theta)
            })
            .collect())
    }
}

/// Radial component `r(θ)` for the given spiral parameters.
pub fn radial<T: Real>(theta: T, a: T, b: T, theta_max: T) -> Result<T> {
    let p = CochleaDeformableParams {
        a,
        b,
        alpha: T::zero(),
        phi: T::zero(),
    };
    Centerline::new(p, theta_max)?.radial(theta)
}

/// Longitudinal component `z(θ)`; the radial parameters do not affect it.
pub fn longitudinal<T: Real>(theta: T, alpha: T, phi: T, theta_max: T) -> Result<T> {
    let p = CochleaDeformableParams {
        a: T::one(),
        b: T::one(),
        alpha,
        phi,
    };
    Centerline::new(p, theta_max)?.longitudinal(theta)
}

/// Centerline polyline in Cartesian coordinates (mm).
pub fn centerline<T: Real>(deformable: &[T], n_samples: usize, theta_max: T) -> Result<Vec<Point3<T>>> {
    Centerline::new(CochleaDeformableParams::from_slice(deformable)?, theta_max)?.sample(n_samples)
}

/// The local (unposed) cochlea shape model.
#[derive(Debug, Clone, PartialEq)]
pub struct CochleaModel<T> {
    pub config: CochleaConfig<T>,
}

impl<T: Real> CochleaModel<T> {
    pub fn new(config: CochleaConfig<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl<T: Real> LocalShape<T> for CochleaModel<T> {
    type Prepared = PreparedCochlea<T>;

    fn deformable_names(&self) -> Vec<String> {
        PARAMETER_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn deformable_bounds(&self) -> Vec<Bound<T>> {
        let b = &self.config.bounds;
        vec![b.a, b.b, b.alpha, b.phi]
    }

    fn prepare(&self, deformable: &[T]) -> Result<PreparedCochlea<T>> {
        PreparedCochlea::new(
            Centerline::new(CochleaDeformableParams::from_slice(deformable)?, self.config.theta_max)?,
            self.config.cross_section,
            self.config.coarse_samples,
        )
    }
}

pub type CochleaShape<T> = RigidShape<CochleaModel<T>, T>;

/// Ten-parameter posed cochlea shape function.
pub fn cochlea_shape<T: Real>(config: CochleaConfig<T>) -> Result<CochleaShape<T>> {
    let rigid = config.rigid_bounds;
    Ok(RigidShape::new(CochleaModel::new(config)?, rigid))
}

/// Default initial parameter vector: deformable init, zero pose.
pub fn default_initial_params<T: Real>() -> Vec<T> {
    let mut v: Vec<T> = DEFAULT_INIT.iter().map(|&x| T::lit(x)).collect();
    v.extend(std::iter::repeat_n(T::zero(), 6));
    v
}

/// Shape function sampled at every voxel of `grid`.
pub fn sdm_grid<T: Real>(shape: &CochleaShape<T>, params: &[T], grid: &Grid<T>) -> Result<Volume<T>> {
    let values = shape.evaluate_points(params, &grid.positions())?;
    Volume::new(grid.clone(), values)
}

/// Result of the nearest-centerline-point search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPoint<T> {
    pub theta: T,
    pub point: Point3<T>,
    pub distance: T,
}

const GROUP: usize = 16;
const GOLDEN_ITERATIONS: usize = 14;
const NEWTON_ITERATIONS: usize = 8;

/// Centerline with cached coarse samples for fast nearest-point queries.
#[derive(Debug, Clone)]
pub struct PreparedCochlea<T> {
    pub centerline: Centerline<T>,
    pub profile: CrossSectionProfile<T>,
    thetas: Vec<T>,
    xs: Vec<T>,
    ys: Vec<T>,
    zs: Vec<T>,
    // bounding sphere (centre, radius) of each run of GROUP samples
    groups: Vec<([T; 3], T)>,
    spacing: T,
}

impl<T: Real> PreparedCochlea<T> {
    pub fn new(centerline: Centerline<T>, profile: CrossSectionProfile<T>, samples: usize) -> Result<Self> {
        let theta_max = centerline.fixed.theta_max;
        let spacing = theta_max / T::lit((samples - 1) as f64);
        let thetas: Vec<T> = (0..samples)
            .map(|i| {
                if i == samples - 1 {
                    theta_max
                } else {
                    spacing * T::lit(i as f64)
                }
            })
            .collect();
        let pts: Vec<Point3<T>> = thetas.iter().map(|&t| centerline.point(t)).collect();
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centerline samples"));
        }
        let groups = pts
            .chunks(GROUP)
            .map(|chunk| {
                let inv = T::one() / T::lit(chunk.len() as f64);
                let mut c = [T::zero(); 3];
                for p in chunk {
                    for a in 0..3 {
                        c[a] += p[a] * inv;
                    }
                }
                let r = chunk.iter().map(|p| dist2(p, &c).sqrt()).fold(T::zero(), T::max);
                (c, r)
            })
            .collect();
        Ok(Self {
            centerline,
            profile,
            xs: pts.iter().map(|p| p[0]).collect(),
            ys: pts.iter().map(|p| p[1]).collect(),
            zs: pts.iter().map(|p| p[2]).collect(),
            thetas,
            groups,
            spacing,
        })
    }

    fn theta_max(&self) -> T {
        self.centerline.fixed.theta_max
    }

    /// Index of the closest coarse sample.
    fn coarse_nearest(&self, y: &Point3<T>) -> usize {
        let mut order: Vec<(T, usize)> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, (c, r))| {
                let d = (dist2(y, c).sqrt() - *r).max(T::zero());
                (d * d, g)
            })
            .collect();
        order.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let mut best = T::infinity();
        let mut best_i = 0;
        for (lb, g) in order {
            if lb > best {
                break;
            }
            let start = g * GROUP;
            let end = (start + GROUP).min(self.thetas.len());
            for i in start..end {
                let dx = self.xs[i] - y[0];
                let dy = self.ys[i] - y[1];
                let dz = self.zs[i] - y[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
        }
        best_i
    }

    fn dist2_at(&self, y: &Point3<T>, theta: T) -> T {
        dist2(&self.centerline.point(theta), y)
    }

    /// Minimises the squared distance over `[lo, hi]`.
    fn refine(&self, y: &Point3<T>, lo: T, hi: T) -> Result<NearestPoint<T>> {
        let inv_phi = T::lit(0.618_033_988_749_894_8);
        let (mut a, mut b) = (lo, hi);
        let mut c = b - (b - a) * inv_phi;
        let mut d = a + (b - a) * inv_phi;
        let mut fc = self.dist2_at(y, c);
        let mut fd = self.dist2_at(y, d);
        for _ in 0..GOLDEN_ITERATIONS {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - (b - a) * inv_phi;
                fc = self.dist2_at(y, c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + (b - a) * inv_phi;
                fd = self.dist2_at(y, d);
            }
        }
        let (mut theta, mut best) = if fc < fd { (c, fc) } else { (d, fd) };

        // Newton on g(θ) = (c(θ) − y)·c'(θ), kept inside the golden bracket
        let tol = T::lit(1e-14) * (T::one() + self.theta_max());
        for _ in 0..NEWTON_ITERATIONS {
            let [p, dp, ddp] = self.centerline.point_derivs(theta);
            let diff = [p[0] - y[0], p[1] - y[1], p[2] - y[2]];
            let g = diff[0] * dp[0] + diff[1] * dp[1] + diff[2] * dp[2];
            let gp =
                dp[0] * dp[0] + dp[1] * dp[1] + dp[2] * dp[2] + diff[0] * ddp[0] + diff[1] * ddp[1] + diff[2] * ddp[2];
            if !(gp > T::zero()) {
                break;
            }
            let next = theta - g / gp;
            if !(next >= a && next <= b) {
                break;
            }
            let f_next = self.dist2_at(y, next);
            if f_next > best {
                break;
            }
            let step = (next - theta).abs();
            theta = next;
            best = f_next;
            if step <= tol {
                break;
            }
        }
        // the minimum may sit on a curve end, where g ≠ 0
        for end in [lo, hi] {
            if end == T::zero() || end == self.theta_max() {
                let f = self.dist2_at(y, end);
                if f < best {
                    best = f;
                    theta = end;
                }
            }
        }
        if !best.is_finite() {
            return Err(Error::NearestPointNotBracketed);
        }
        Ok(NearestPoint {
            theta,
            point: self.centerline.point(theta),
            distance: best.sqrt(),
        })
    }

    fn bracket(&self, centre: T, half_width: T) -> (T, T) {
        (
            (centre - half_width).max(T::zero()),
            (centre + half_width).min(self.theta_max()),
        )
    }

    pub fn nearest(&self, y: &Point3<T>) -> Result<NearestPoint<T>> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query point"));
        }
        let i = self.coarse_nearest(y);
        let (lo, hi) = self.bracket(self.thetas[i], self.spacing);
        self.refine(y, lo, hi)
    }

    /// Nearest point restricted to a neighbourhood of `anchor`.
    pub fn nearest_near(&self, y: &Point3<T>, anchor: T) -> Result<NearestPoint<T>> {
        let (lo, hi) = self.bracket(anchor, self.spacing * T::two());
        self.refine(y, lo, hi)
    }

    #[inline]
    fn tube_radius(&self, theta: T) -> T {
        self.profile.radius(theta, self.theta_max())
    }
}

impl<T: Real> PreparedShape<T> for PreparedCochlea<T> {
    fn value(&self, y: &Point3<T>) -> Result<T> {
        let np = self.nearest(y)?;
        Ok(self.tube_radius(np.theta) - np.distance)
    }

    fn sample(&self, y: &Point3<T>) -> Result<LocalSample<T>> {
        let np = self.nearest(y)?;
        let value = self.tube_radius(np.theta) - np.distance;
        let mut gradient = [T::zero(); 3];
        if np.distance > T::zero() {
            for a in 0..3 {
                gradient[a] = -(y[a] - np.point[a]) / np.distance;
            }
        }
        // ρ(θ*) term: ∇θ* = c'/g' away from the curve ends
        let interior = np.theta > T::zero() && np.theta < self.theta_max();
        if interior {
            let [p, dp, ddp] = self.centerline.point_derivs(np.theta);
            let gp = dp[0] * dp[0]
                + dp[1] * dp[1]
                + dp[2] * dp[2]
                + (p[0] - y[0]) * ddp[0]
                + (p[1] - y[1]) * ddp[1]
                + (p[2] - y[2]) * ddp[2];
            if gp > T::zero() {
                let k = self.profile.slope(self.theta_max()) / gp;
                for a in 0..3 {
                    gradient[a] += k * dp[a];
                }
            }
        }
        Ok(LocalSample {
            value,
            gradient,
            anchor: Some(np.theta),
        })
    }

    fn value_near(&self, y: &Point3<T>, anchor: Option<T>) -> Result<T> {
        let np = match anchor {
            Some(t) => self.nearest_near(y, t)?,
            None => self.nearest(y)?,
        };
        Ok(self.tube_radius(np.theta) - np.distance)
    }
}

#[inline]
fn dist2<T: Real>(a: &Point3<T>, b: &Point3<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Grid of the given shape whose centre is the centre of the default model's
/// bounding box, so the default cochlea sits in the middle of the volume.
pub fn default_grid<T: Real>(dims: [usize; 3], spacing: T) -> Result<Grid<T>> {
    Grid::centered(dims, spacing, default_center())
}

/// Centre of the bounding box of the default-initialised tube, mm.
pub fn default_center<T: Real>() -> [T; 3] {
    [T::lit(1.25), T::lit(0.7), T::lit(1.7)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cl(p: [f64; 4]) -> Centerline<f64> {
        Centerline::new(
            CochleaDeformableParams::from_slice(&p).unwrap(),
            5.0 * std::f64::consts::PI,
        )
        .unwrap()
    }

    #[test]
    fn radial_starts_at_p0() {
        let c = cl(DEFAULT_INIT);
        assert_eq!(c.radial(0.0).unwrap(), 5.0);
        let p = c.sample(10).unwrap();
        assert!((p[0][0].hypot(p[0][1]) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn radial_spot_value() {
        let tm = 5.0 * std::f64::consts::PI;
        let r = radial(2.0 * std::f64::consts::PI, 4.0, 0.15, tm).unwrap();
        // 4·exp(−0.15·2π), mpmath
        assert!((r - 1.558_644_549_501_387_2).abs() < 1e-14);
    }

    #[test]
    fn longitudinal_at_zero() {
        let tm = 5.0 * std::f64::consts::PI;
        let z = longitudinal(0.0, 0.7, 0.3, tm).unwrap();
        assert!((z - 0.7 * 0.3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_rejected() {
        let c = cl(DEFAULT_INIT);
        assert!(matches!(c.radial(-0.1), Err(Error::CurveParameterOutOfRange { .. })));
        assert!(c.longitudinal(5.0 * std::f64::consts::PI + 1e-9).is_err());
        assert!(FixedConstants::new(THETA_0 + 3.0f64).is_err());
    }

    #[test]
    fn continuity_at_joins() {
        let c = cl([5.5, 0.3, 1.7, -2.0]);
        let f = c.fixed;
        let below = |t: f64| t * (1.0 - f64::EPSILON);
        let (r0, dr0, _) = c.radial_derivs(below(f.theta0));
        let (r1, dr1, _) = c.radial_derivs(f.theta0);
        assert!((r0 - r1).abs() < 1e-12 && (dr0 - dr1).abs() < 1e-12);
        let (z0, dz0, _) = c.longitudinal_derivs(below(f.theta1));
        let (z1, dz1, _) = c.longitudinal_derivs(f.theta1);
        assert!((z0 - z1).abs() < 1e-12 && (dz0 - dz1).abs() < 1e-12);
        assert!(c.longitudinal_derivs(f.theta_max).1.abs() < 1e-12);
    }

    #[test]
    fn point_derivatives_match_differences() {
        let c = cl([4.2, 0.17, 0.8, 0.4]);
        for &t in &[0.3, 2.0, 4.0, 9.0, 13.5] {
            let [_, d1, d2] = c.point_derivs(t);
            let h = 1e-5;
            let p = c.point(t + h);
            let m = c.point(t - h);
            let [_, pd1, _] = c.point_derivs(t + h);
            let [_, md1, _] = c.point_derivs(t - h);
            for a in 0..3 {
                assert!(((p[a] - m[a]) / (2.0 * h) - d1[a]).abs() < 1e-8);
                assert!(((pd1[a] - md1[a]) / (2.0 * h) - d2[a]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn centerline_point_has_tube_radius() {
        let model = CochleaModel::new(CochleaConfig::default()).unwrap();
        let prep = model.prepare(&DEFAULT_INIT).unwrap();
        let theta = 3.7;
        let p = prep.centerline.point(theta);
        let v = prep.value(&p).unwrap();
        let rho = CrossSectionProfile::<f64>::default().radius(theta, 5.0 * std::f64::consts::PI);
        assert!((v - rho).abs() < 1e-9);
    }

    #[test]
    fn surface_point_is_zero() {
        let model = CochleaModel::new(CochleaConfig::default()).unwrap();
        let prep = model.prepare(&DEFAULT_INIT).unwrap();
        let theta = 5.1;
        let [p, d1, _] = prep.centerline.point_derivs(theta);
        // a direction perpendicular to the tangent
        let up = [0.0, 0.0, 1.0];
        let mut n = [
            d1[1] * up[2] - d1[2] * up[1],
            d1[2] * up[0] - d1[0] * up[2],
            d1[0] * up[1] - d1[1] * up[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        n.iter_mut().for_each(|v| *v /= len);
        let rho = prep.profile.radius(theta, prep.centerline.fixed.theta_max);
        let y = [p[0] + rho * n[0], p[1] + rho * n[1], p[2] + rho * n[2]];
        assert!(prep.value(&y).unwrap().abs() < 1e-9);
    }

    #[test]
    fn spatial_gradient_matches_differences() {
        let model = CochleaModel::new(CochleaConfig::default()).unwrap();
        let prep = model.prepare(&[4.5, 0.18, 0.9, -0.4]).unwrap();
        for y in [[1.0f64, 2.0, 0.5], [-1.5, 0.3, 1.2], [3.9, -2.0, 0.1], [0.2, 0.1, 2.5]] {
            let s = prep.sample(&y).unwrap();
            for a in 0..3 {
                let h = 1e-6;
                let mut p = y;
                p[a] += h;
                let mut m = y;
                m[a] -= h;
                let fd = (prep.value(&p).unwrap() - prep.value(&m).unwrap()) / (2.0 * h);
                assert!(
                    (fd - s.gradient[a]).abs() < 1e-6,
                    "{y:?} axis {a}: {fd} vs {}",
                    s.gradient[a]
                );
            }
        }
    }
}
