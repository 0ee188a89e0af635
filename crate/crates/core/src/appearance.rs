//! Student's-t mixture-of-mixtures appearance model.
//!
//! Each class `k` (0 = background, 1 = foreground) has its own mixture of
//! Student's-t components. Parameters are refined by EM on the Gaussian
//! scale-mixture representation, with every voxel weighted by its class
//! responsibility.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::scalar::{Real, REDUCTION_BLOCK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentT<T> {
    pub pi: T,
    pub mu: T,
    pub sigma: T,
    pub nu: T,
}

impl<T: Real> StudentT<T> {
    pub fn new(pi: T, mu: T, sigma: T, nu: T) -> Result<Self> {
        let c = Self { pi, mu, sigma, nu };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if ![self.pi, self.mu, self.sigma, self.nu].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intensity parameters"));
        }
        if !(self.pi >= T::zero() && self.pi <= T::one()) {
            return Err(invalid("pi", format!("mixing weight {} not in [0, 1]", self.pi)));
        }
        if !(self.sigma > T::zero()) || !(self.nu > T::zero()) {
            return Err(invalid("sigma, nu", "scale and degrees of freedom must be > 0"));
        }
        Ok(())
    }

    /// `log π + log t(I | μ, σ, ν)` with the normalizing constant precomputed.
    fn kernel(&self) -> Kernel<T> {
        let nu = self.nu.as_f64();
        let c = ln_gamma((nu + 1.0) / 2.0)
            - ln_gamma(nu / 2.0)
            - 0.5 * (nu * std::f64::consts::PI).ln()
            - self.sigma.as_f64().ln();
        Kernel {
            log_norm: T::lit(c),
            log_pi: self.pi.ln(),
            mu: self.mu,
            inv_sigma: T::one() / self.sigma,
            nu: self.nu,
            half_nu1: (self.nu + T::one()) * T::half(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Kernel<T> {
    log_norm: T,
    log_pi: T,
    mu: T,
    inv_sigma: T,
    nu: T,
    half_nu1: T,
}

impl<T: Real> Kernel<T> {
    /// Squared standardized residual.
    #[inline]
    fn delta2(&self, x: T) -> T {
        let z = (x - self.mu) * self.inv_sigma;
        z * z
    }

    #[inline]
    fn log_t(&self, delta2: T) -> T {
        self.log_norm - self.half_nu1 * (delta2 / self.nu).ln_1p()
    }
}

fn check_t_args<T: Real>(x: T, mu: T, sigma: T, nu: T) -> Result<()> {
    if ![x, mu, sigma, nu].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("t density argument"));
    }
    if !(sigma > T::zero()) || !(nu > T::zero()) {
        return Err(invalid("sigma, nu", "scale and degrees of freedom must be > 0"));
    }
    Ok(())
}

/// Log density of the location-scale Student's t distribution.
pub fn log_t_pdf<T: Real>(x: T, mu: T, sigma: T, nu: T) -> Result<T> {
    check_t_args(x, mu, sigma, nu)?;
    let k = StudentT {
        pi: T::one(),
        mu,
        sigma,
        nu,
    }
    .kernel();
    Ok(k.log_t(k.delta2(x)))
}

pub fn t_pdf<T: Real>(x: T, mu: T, sigma: T, nu: T) -> Result<T> {
    log_t_pdf(x, mu, sigma, nu).map(T::exp)
}

#[inline]
fn log_sum_exp<T: Real>(terms: &[T]) -> T {
    let m = terms.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + terms.iter().map(|&t| (t - m).exp()).sum::<T>().ln()
}

/// Mixture parameters for both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams<T> {
    pub background: Vec<StudentT<T>>,
    pub foreground: Vec<StudentT<T>>,
}

impl<T: Real> IntensityParams<T> {
    pub fn new(background: Vec<StudentT<T>>, foreground: Vec<StudentT<T>>) -> Result<Self> {
        let p = Self { background, foreground };
        p.validate()?;
        Ok(p)
    }

    /// CT defaults: foreground components at 0 and 500 HU, background at
    /// 0, 2000, −1000 and 600 HU; σ = 150 HU, ν = 5, equal weights.
    pub fn ct_default() -> Self {
        Self::from_means(&[0.0, 2000.0, -1000.0, 600.0], &[0.0, 500.0], 150.0, 5.0)
    }

    /// Equal-weight components at the given means with a shared σ and ν.
    pub fn from_means(background: &[f64], foreground: &[f64], sigma: f64, nu: f64) -> Self {
        let make = |means: &[f64]| {
            let pi = T::one() / T::lit(means.len() as f64);
            means
                .iter()
                .map(|&m| StudentT {
                    pi,
                    mu: T::lit(m),
                    sigma: T::lit(sigma),
                    nu: T::lit(nu),
                })
                .collect()
        };
        Self {
            background: make(background),
            foreground: make(foreground),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, comps) in [&self.background, &self.foreground].into_iter().enumerate() {
            if comps.is_empty() {
                return Err(invalid("intensity", format!("class {k} has no components")));
            }
            for c in comps {
                c.validate()?;
            }
            let total: f64 = comps.iter().map(|c| c.pi.as_f64()).sum();
            let tol = if std::mem::size_of::<T>() == 4 { 1e-5 } else { 1e-12 };
            if (total - 1.0).abs() > tol {
                return Err(invalid("pi", format!("class {k} weights sum to {total}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn class(&self, k: usize) -> Result<&[StudentT<T>]> {
        match k {
            0 => Ok(&self.background),
            1 => Ok(&self.foreground),
            _ => Err(Error::InvalidClass(k)),
        }
    }

    fn class_mut(&mut self, k: usize) -> &mut Vec<StudentT<T>> {
        if k == 0 {
            &mut self.background
        } else {
            &mut self.foreground
        }
    }

    /// `4 (M₀ + M₁)`.
    pub fn parameter_count(&self) -> usize {
        4 * (self.background.len() + self.foreground.len())
    }

    /// Foreground parameters flattened as `π, μ, σ, ν` per component.
    pub fn foreground_vector(&self) -> Vec<T> {
        self.foreground
            .iter()
            .flat_map(|c| [c.pi, c.mu, c.sigma, c.nu])
            .collect()
    }

    /// `log p(x | k, θ_I)`.
    pub fn class_log_likelihood(&self, x: T, k: usize) -> Result<T> {
        if !x.is_finite() {
            return Err(Error::NonFinite("intensity"));
        }
        let kernels: Vec<Kernel<T>> = self.class(k)?.iter().map(StudentT::kernel).collect();
        Ok(class_log_density(&kernels, x))
    }

    pub fn cast<U: Real>(&self) -> IntensityParams<U> {
        let c = |v: &Vec<StudentT<T>>| {
            v.iter()
                .map(|s| StudentT {
                    pi: U::lit(s.pi.as_f64()),
                    mu: U::lit(s.mu.as_f64()),
                    sigma: U::lit(s.sigma.as_f64()),
                    nu: U::lit(s.nu.as_f64()),
                })
                .collect()
        };
        IntensityParams {
            background: c(&self.background),
            foreground: c(&self.foreground),
        }
    }
}

fn class_log_density<T: Real>(kernels: &[Kernel<T>], x: T) -> T {
    let mut terms = [T::zero(); 16];
    if kernels.len() <= terms.len() {
        for (t, k) in terms.iter_mut().zip(kernels) {
            *t = k.log_pi + k.log_t(k.delta2(x));
        }
        log_sum_exp(&terms[..kernels.len()])
    } else {
        let v: Vec<T> = kernels.iter().map(|k| k.log_pi + k.log_t(k.delta2(x))).collect();
        log_sum_exp(&v)
    }
}

/// `p(x | k, θ_I) = Σ_m π_m t(x | μ_m, σ_m, ν_m)`.
pub fn class_likelihood<T: Real>(x: T, k: usize, params: &IntensityParams<T>) -> Result<T> {
    params.class_log_likelihood(x, k).map(T::exp)
}

/// Per-voxel class log-likelihoods for a fixed `θ_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogLikelihoods<T> {
    pub background: Vec<T>,
    pub foreground: Vec<T>,
}

impl<T: Real> ClassLogLikelihoods<T> {
    pub fn compute(image: &[T], params: &IntensityParams<T>) -> Result<Self> {
        params.validate()?;
        if let Some(n) = image.iter().position(|v| !v.is_finite()) {
            return Err(crate::shape::at_voxel(n, Error::NonFinite("intensity")));
        }
        let eval = |comps: &[StudentT<T>]| -> Vec<T> {
            let kernels: Vec<Kernel<T>> = comps.iter().map(StudentT::kernel).collect();
            image.par_iter().map(|&x| class_log_density(&kernels, x)).collect()
        };
        Ok(Self {
            background: eval(&params.background),
            foreground: eval(&params.foreground),
        })
    }

    pub fn len(&self) -> usize {
        self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.background.is_empty()
    }
}

/// How degrees of freedom are treated in the MI-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DofUpdate {
    #[default]
    Fixed,
    Solve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct MiOptions<T> {
    pub dof: DofUpdate,
    /// Lower bound on every component scale, as a fraction of the image
    /// intensity standard deviation.
    pub sigma_floor: T,
    /// Components whose effective weight is below this fraction of N are frozen.
    pub freeze_fraction: T,
    pub max_rounds: usize,
    /// Stop once the relative change of the foreground parameters is below this.
    pub tolerance: T,
}

impl<T: Real> Default for MiOptions<T> {
    fn default() -> Self {
        Self {
            dof: DofUpdate::Fixed,
            sigma_floor: T::lit(1e-3),
            freeze_fraction: T::lit(1e-8),
            max_rounds: 50,
            tolerance: T::lit(1e-3),
        }
    }
}

impl<T: Real> MiOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_floor > T::zero()) || !(self.tolerance > T::zero()) {
            return Err(invalid("mi options", "sigma_floor and tolerance must be > 0"));
        }
        if !(self.freeze_fraction >= T::zero()) || self.max_rounds == 0 {
            return Err(invalid(
                "mi options",
                "freeze_fraction >= 0 and max_rounds >= 1 required",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiReport {
    pub rounds: usize,
    /// `(class, component)` pairs frozen in at least one round.
    pub frozen: Vec<(usize, usize)>,
    /// Class-weighted log-likelihood before the first and after every round.
    pub weighted_log_likelihood: Vec<f64>,
}

/// `Σ_n [u_n log p(I_n|1) + (1 − u_n) log p(I_n|0)]`.
pub fn weighted_log_likelihood<T: Real>(image: &[T], u: &[T], params: &IntensityParams<T>) -> Result<T> {
    check_weights(image, u)?;
    let ll = ClassLogLikelihoods::compute(image, params)?;
    let parts: Vec<T> = (0..image.len())
        .into_par_iter()
        .with_min_len(REDUCTION_BLOCK)
        .map(|n| u[n] * ll.foreground[n] + (T::one() - u[n]) * ll.background[n])
        .collect();
    Ok(crate::scalar::block_sum(&parts))
}

fn check_weights<T: Real>(image: &[T], u: &[T]) -> Result<()> {
    if image.len() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} intensities, {} responsibilities",
            image.len(),
            u.len()
        )));
    }
    if let Some(n) = u.iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(invalid(
            "U",
            format!("responsibility at voxel {n} is {} (not in [0, 1])", u[n]),
        ));
    }
    Ok(())
}

// Per-component sufficient statistics.
#[derive(Clone, Copy, Default)]
struct Stats {
    s0: f64,
    s1: f64,
    s2: f64,
    s4: f64,
}

fn sum_blocks<F>(n: usize, m: usize, f: F) -> Vec<Stats>
where
    F: Fn(usize, &mut [Stats]) + Sync,
{
    let blocks: Vec<Vec<Stats>> = (0..n.div_ceil(REDUCTION_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Stats::default(); m];
            for i in b * REDUCTION_BLOCK..((b + 1) * REDUCTION_BLOCK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![Stats::default(); m];
    for b in blocks {
        for (t, s) in total.iter_mut().zip(b) {
            t.s0 += s.s0;
            t.s1 += s.s1;
            t.s2 += s.s2;
            t.s4 += s.s4;
        }
    }
    total
}

fn update_class<T: Real>(
    image: &[T],
    weight: impl Fn(usize) -> T + Sync,
    comps: &[StudentT<T>],
    opts: &MiOptions<T>,
    floor: f64,
) -> (Vec<StudentT<T>>, Vec<usize>) {
    let n = image.len();
    let m = comps.len();
    let kernels: Vec<Kernel<T>> = comps.iter().map(StudentT::kernel).collect();
    let class_weight: f64 = {
        let w: Vec<T> = (0..n).map(&weight).collect();
        crate::scalar::block_sum(&w).as_f64()
    };
    if !(class_weight > 1e-12) {
        return (comps.to_vec(), Vec::new());
    }

    // τ_nm w_nm and friends for one voxel
    let responsibilities = |i: usize, out: &mut [(f64, f64)]| {
        let x = image[i];
        let mut terms = [T::zero(); 16];
        let mut d2 = [T::zero(); 16];
        for j in 0..m {
            d2[j] = kernels[j].delta2(x);
            terms[j] = kernels[j].log_pi + kernels[j].log_t(d2[j]);
        }
        let lse = log_sum_exp(&terms[..m]);
        for j in 0..m {
            let tau = (terms[j] - lse).exp();
            let w = (kernels[j].nu + T::one()) / (kernels[j].nu + d2[j]);
            out[j] = (tau.as_f64(), w.as_f64());
        }
    };

    let first = sum_blocks(n, m, |i, acc| {
        let u = weight(i).as_f64();
        if u == 0.0 {
            return;
        }
        let mut tw = [(0.0, 0.0); 16];
        responsibilities(i, &mut tw[..m]);
        let x = image[i].as_f64();
        for j in 0..m {
            let (tau, w) = tw[j];
            let ut = u * tau;
            acc[j].s0 += ut;
            acc[j].s1 += ut * w;
            acc[j].s2 += ut * w * x;
            acc[j].s4 += ut * (w.ln() - w);
        }
    });

    let freeze_below = opts.freeze_fraction.as_f64() * n as f64;
    let frozen: Vec<usize> = (0..m)
        .filter(|&j| !(first[j].s0 >= freeze_below && first[j].s0 > 0.0 && first[j].s1 > 0.0))
        .collect();
    let mu_new: Vec<f64> = (0..m)
        .map(|j| {
            if frozen.contains(&j) {
                comps[j].mu.as_f64()
            } else {
                first[j].s2 / first[j].s1
            }
        })
        .collect();

    // second pass for the scale about the updated location
    let second = sum_blocks(n, m, |i, acc| {
        let u = weight(i).as_f64();
        if u == 0.0 {
            return;
        }
        let mut tw = [(0.0, 0.0); 16];
        responsibilities(i, &mut tw[..m]);
        let x = image[i].as_f64();
        for j in 0..m {
            let (tau, w) = tw[j];
            let r = x - mu_new[j];
            acc[j].s0 += u * tau * w * r * r;
        }
    });

    let frozen_pi: f64 = frozen.iter().map(|&j| comps[j].pi.as_f64()).sum();
    let active_s0: f64 = (0..m).filter(|j| !frozen.contains(j)).map(|j| first[j].s0).sum();
    let mut out = comps.to_vec();
    for j in 0..m {
        if frozen.contains(&j) {
            continue;
        }
        let st = &first[j];
        let pi = (1.0 - frozen_pi) * st.s0 / active_s0;
        let sigma = (second[j].s0 / st.s0).sqrt().max(floor);
        let nu = match opts.dof {
            DofUpdate::Fixed => comps[j].nu.as_f64(),
            DofUpdate::Solve => solve_dof(comps[j].nu.as_f64(), st.s4 / st.s0),
        };
        out[j] = StudentT {
            pi: T::lit(pi),
            mu: T::lit(mu_new[j]),
            sigma: T::lit(sigma),
            nu: T::lit(nu),
        };
    }
    // exact renormalization
    let total: T = out.iter().map(|c| c.pi).sum();
    for c in &mut out {
        c.pi /= total;
    }
    (out, frozen)
}

/// Root of the degrees-of-freedom stationarity equation on [0.1, 200].
fn solve_dof(nu_old: f64, mean_log_w_minus_w: f64) -> f64 {
    let h = (nu_old + 1.0) / 2.0;
    let c = 1.0 + mean_log_w_minus_w + digamma(h) - h.ln();
    let f = |nu: f64| -digamma(nu / 2.0) + (nu / 2.0).ln() + c;
    let (mut lo, mut hi) = (0.1, 200.0);
    let (flo, fhi) = (f(lo), f(hi));
    // f decreases in ν; clamp when there is no sign change
    if flo <= 0.0 {
        return lo;
    }
    if fhi >= 0.0 {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 * mid {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn intensity_sd<T: Real>(image: &[T]) -> f64 {
    let n = image.len() as f64;
    let mean = crate::scalar::block_sum(image).as_f64() / n;
    let dev: Vec<f64> = image.iter().map(|&x| (x.as_f64() - mean).powi(2)).collect();
    (crate::scalar::block_sum(&dev) / n).sqrt()
}

/// `(class, component)` pairs skipped by an MI round.
pub type Frozen = Vec<(usize, usize)>;

/// One weighted EM round over both classes.
pub fn mi_round<T: Real>(
    image: &[T],
    u: &[T],
    params: &IntensityParams<T>,
    opts: &MiOptions<T>,
) -> Result<(IntensityParams<T>, Frozen)> {
    check_weights(image, u)?;
    params.validate()?;
    opts.validate()?;
    if params.background.len() > 16 || params.foreground.len() > 16 {
        return Err(invalid("intensity", "at most 16 components per class"));
    }
    let floor = opts.sigma_floor.as_f64() * intensity_sd(image).max(f64::MIN_POSITIVE);
    let mut next = params.clone();
    let mut frozen = Vec::new();
    for k in 0..2 {
        let comps = params.class(k)?;
        let (updated, fz) = if k == 1 {
            update_class(image, |i| u[i], comps, opts, floor)
        } else {
            update_class(image, |i| T::one() - u[i], comps, opts, floor)
        };
        *next.class_mut(k) = updated;
        frozen.extend(fz.into_iter().map(|j| (k, j)));
    }
    for &(k, j) in &frozen {
        warn!("class {k} component {j} has negligible weight; frozen for this round");
    }
    Ok((next, frozen))
}

/// Relative change `‖a − b‖ / ‖b‖` of two parameter vectors.
pub fn relative_change<T: Real>(new: &[T], old: &[T]) -> T {
    let num: T = new.iter().zip(old).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    let den: T = old.iter().map(|&b| b * b).sum::<T>().sqrt();
    if den > T::zero() {
        num / den
    } else {
        num
    }
}

/// MI-step: EM rounds until the foreground parameters settle.
pub fn mi_step<T: Real>(
    image: &[T],
    u: &[T],
    params: &IntensityParams<T>,
    opts: &MiOptions<T>,
) -> Result<(IntensityParams<T>, MiReport)> {
    let mut current = params.clone();
    let mut report = MiReport {
        weighted_log_likelihood: vec![weighted_log_likelihood(image, u, &current)?.as_f64()],
        ..Default::default()
    };
    for _ in 0..opts.max_rounds {
        let (next, frozen) = mi_round(image, u, &current, opts)?;
        for f in frozen {
            if !report.frozen.contains(&f) {
                report.frozen.push(f);
            }
        }
        let change = relative_change(&next.foreground_vector(), &current.foreground_vector());
        current = next;
        report.rounds += 1;
        report
            .weighted_log_likelihood
            .push(weighted_log_likelihood(image, u, &current)?.as_f64());
        if change < opts.tolerance {
            break;
        }
    }
    Ok((current, report))
}
