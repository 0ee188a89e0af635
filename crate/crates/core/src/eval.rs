//! Segmentation metrics, synthetic phantoms and the reference-length sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::IntensityParams;
use crate::cochlea::{cochlea_shape, default_grid, CochleaConfig};
use crate::error::{invalid, Error, Result};
use crate::inference::{fit, FitConfig};
use crate::scalar::Real;
use crate::shape::{EllipsePhantom, ShapeFunction};
use crate::volume::{BinaryMask, Grid, Volume};

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice<T: Real>(a: &BinaryMask<T>, b: &BinaryMask<T>) -> Result<T> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::GridMismatch);
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(T::one());
    }
    Ok(T::lit(2.0 * inter as f64 / (na + nb) as f64))
}

/// Foreground voxels with a 6-neighbour that is background or outside the grid.
///
/// Axes of extent 1 have no neighbours, so 2-D masks behave as 2-D.
pub fn surface<T: Real>(mask: &BinaryMask<T>) -> Vec<bool> {
    let g = &mask.grid;
    let d = g.dims;
    (0..g.len())
        .map(|n| {
            if !mask.data[n] {
                return false;
            }
            let c = g.coords(n);
            for a in 0..3 {
                if d[a] == 1 {
                    continue;
                }
                for step in [-1i64, 1] {
                    let q = c[a] as i64 + step;
                    if q < 0 || q >= d[a] as i64 {
                        return true;
                    }
                    let mut nc = c;
                    nc[a] = q as usize;
                    if !mask.data[g.linear_index(nc[0], nc[1], nc[2])] {
                        return true;
                    }
                }
            }
            false
        })
        .collect()
}

/// Squared distance transform along one line (lower envelope of parabolas).
fn edt_line(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        let qf = q as f64 * h;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let pf = p as f64 * h;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64 * h;
        while j < k as usize && z[j + 1] < qf {
            j += 1;
        }
        let p = v[j];
        let d = (q as f64 - p as f64) * h;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest site.
pub fn squared_distance_transform<T: Real>(grid: &Grid<T>, sites: &[bool]) -> Vec<f64> {
    let d = grid.dims;
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        if d[axis] == 1 {
            continue;
        }
        let h = grid.spacing[axis].as_f64();
        let len = d[axis];
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let starts: Vec<usize> = (0..grid.len()).filter(|&n| grid.coords(n)[axis] == 0).collect();
        let lines: Vec<(usize, Vec<f64>)> = starts
            .par_iter()
            .map(|&s| {
                let line: Vec<f64> = (0..len).map(|i| f[s + i * stride]).collect();
                let mut out = vec![0.0; len];
                let mut v = vec![0usize; len];
                let mut z = vec![0.0; len + 1];
                edt_line(&line, h, &mut out, &mut v, &mut z);
                (s, out)
            })
            .collect();
        for (s, out) in lines {
            for (i, o) in out.into_iter().enumerate() {
                f[s + i * stride] = o;
            }
        }
    }
    f
}

/// Nearest-rank percentile of unsorted values, `p` in (0, 100].
pub fn nearest_rank(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    values[rank.min(n) - 1]
}

fn directed(from: &[bool], to_sq: &[f64], p: f64) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_sq)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    nearest_rank(&mut d, p)
}

/// Symmetric percentile Hausdorff distance in mm: the average of the two
/// directed surface-to-surface percentiles.
pub fn hausdorff<T: Real>(a: &BinaryMask<T>, b: &BinaryMask<T>, percentile: f64) -> Result<T> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::GridMismatch);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(invalid("percentile", format!("{percentile} not in (0, 100]")));
    }
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let sa = surface(a);
    let sb = surface(b);
    let da = squared_distance_transform(&a.grid, &sa);
    let db = squared_distance_transform(&b.grid, &sb);
    let ab = directed(&sa, &db, percentile);
    let ba = directed(&sb, &da, percentile);
    Ok(T::lit(0.5 * (ab + ba)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian<T> {
    pub mean: T,
    pub sd: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub enum PhantomGeometry<T> {
    Ellipse {
        center: [T; 2],
        semi_axes: [T; 2],
        angle: T,
    },
    Cochlea {
        theta_s: Vec<T>,
        #[serde(default)]
        config: CochleaConfig<T>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct PhantomSpec<T> {
    pub geometry: PhantomGeometry<T>,
    pub grid: Grid<T>,
    pub background: Gaussian<T>,
    pub foreground: Gaussian<T>,
    pub seed: u64,
}

impl<T: Real> PhantomSpec<T> {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.grid.dims, self.grid.spacing, self.grid.origin)?;
        for g in [self.background, self.foreground] {
            if !(g.sd >= T::zero()) || !g.mean.is_finite() || !g.sd.is_finite() {
                return Err(invalid("intensity", "class sd must be finite and >= 0"));
            }
        }
        if let PhantomGeometry::Ellipse { semi_axes, .. } = &self.geometry {
            if semi_axes.iter().any(|&a| !(a > T::zero())) {
                return Err(invalid("semi_axes", "semi-axes must be > 0"));
            }
        }
        Ok(())
    }

    /// 128×128 unit-square ellipse phantom.
    pub fn unit_square_ellipse(seed: u64) -> Self {
        let h = T::one() / T::lit(128.0);
        Self {
            geometry: PhantomGeometry::Ellipse {
                center: [T::lit(0.5), T::lit(0.5)],
                semi_axes: [T::lit(0.3), T::lit(0.2)],
                angle: T::lit(0.5),
            },
            grid: Grid {
                dims: [128, 128, 1],
                spacing: [h; 3],
                origin: [h * T::half(), h * T::half(), T::zero()],
            },
            background: Gaussian {
                mean: T::zero(),
                sd: T::lit(0.3),
            },
            foreground: Gaussian {
                mean: T::one(),
                sd: T::lit(0.3),
            },
            seed,
        }
    }
}

/// Generating parameters of the cochlea self-consistency phantom: the default
/// init perturbed in every deformable and pose entry.
pub const COCHLEA_PHANTOM_THETA: [f64; 10] = [4.3, 0.17, 0.65, 0.22, 0.04, -0.03, 0.05, 0.15, -0.1, 0.1];

impl<T: Real> PhantomSpec<T> {
    /// 60×50×50 cochlea phantom at 0.2 mm around the default tube.
    pub fn cochlea_phantom(seed: u64) -> Self {
        Self {
            geometry: PhantomGeometry::Cochlea {
                theta_s: COCHLEA_PHANTOM_THETA.iter().map(|&v| T::lit(v)).collect(),
                config: CochleaConfig::default(),
            },
            grid: default_grid([60, 50, 50], T::lit(0.2)).expect("valid default grid"),
            background: Gaussian {
                mean: T::lit(2000.0),
                sd: T::lit(700.0),
            },
            foreground: Gaussian {
                mean: T::lit(100.0),
                sd: T::lit(500.0),
            },
            seed,
        }
    }
}

/// Ground-truth mask of a phantom geometry on its grid.
pub fn phantom_mask<T: Real>(spec: &PhantomSpec<T>) -> Result<BinaryMask<T>> {
    let grid = &spec.grid;
    let data = match &spec.geometry {
        PhantomGeometry::Ellipse {
            center,
            semi_axes,
            angle,
        } => {
            let e = EllipsePhantom::new(*center, *semi_axes, *angle)?;
            (0..grid.len()).map(|n| e.contains(&grid.position(n))).collect()
        }
        PhantomGeometry::Cochlea { theta_s, config } => {
            let shape = cochlea_shape(config.clone())?;
            let v = shape.evaluate_points(theta_s, &grid.positions())?;
            v.into_iter().map(|s| s >= T::zero()).collect()
        }
    };
    BinaryMask::new(grid.clone(), data)
}

/// Image with Gaussian class intensities drawn in voxel order, plus its truth mask.
pub fn synth_phantom<T: Real>(spec: &PhantomSpec<T>) -> Result<(Volume<T>, BinaryMask<T>)> {
    spec.validate()?;
    let mask = phantom_mask(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = mask
        .data
        .iter()
        .map(|&inside| {
            let g = if inside { spec.foreground } else { spec.background };
            let z: f64 = StandardNormal.sample(&mut rng);
            g.mean + g.sd * T::lit(z)
        })
        .collect();
    Ok((Volume::new(spec.grid.clone(), data)?, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub l_ref: f64,
    pub log_joint: Option<f64>,
    pub dice_sroi: Option<f64>,
    pub dice_ssi: Option<f64>,
    pub error: Option<String>,
}

/// Fits once per reference length; failed rows carry the error message.
pub fn lref_sweep<T: Real>(
    image: &Volume<T>,
    shape: &dyn ShapeFunction<T>,
    theta_s0: &[T],
    theta_i0: &IntensityParams<T>,
    config: &FitConfig<T>,
    l_refs: &[T],
    truth: Option<&BinaryMask<T>>,
) -> Result<Vec<SweepRow>> {
    if l_refs.is_empty() {
        return Err(invalid("l_ref grid", "empty"));
    }
    Ok(l_refs
        .par_iter()
        .with_max_len(1)
        .map(|&l| {
            let cfg = FitConfig {
                l_ref: l,
                ..config.clone()
            };
            let row = fit(image, shape, theta_s0, theta_i0, &cfg).and_then(|r| {
                let (ds, dh) = match truth {
                    Some(t) => (Some(dice(&r.sroi, t)?.as_f64()), Some(dice(&r.ssi, t)?.as_f64())),
                    None => (None, None),
                };
                Ok((r.log_joint.as_f64(), ds, dh))
            });
            match row {
                Ok((lj, ds, dh)) => SweepRow {
                    l_ref: l.as_f64(),
                    log_joint: Some(lj),
                    dice_sroi: ds,
                    dice_ssi: dh,
                    error: None,
                },
                Err(e) => SweepRow {
                    l_ref: l.as_f64(),
                    log_joint: None,
                    dice_sroi: None,
                    dice_ssi: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// CSV with columns `l_ref,log_joint,dice_sroi,dice_ssi,status`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut out = String::from("l_ref,log_joint,dice_sroi,dice_ssi,status\n");
    for r in rows {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        out.push_str(&format!(
            "{:?},{},{},{},{}\n",
            r.l_ref,
            opt(r.log_joint),
            opt(r.dice_sroi),
            opt(r.dice_ssi),
            status
        ));
    }
    out
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3]) -> Grid<f64> {
        Grid::new(d, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn dice_conventions() {
        let g = grid([4, 1, 1]);
        let empty = BinaryMask::new(g.clone(), vec![false; 4]).unwrap();
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let a = BinaryMask::new(g.clone(), vec![true, true, false, false]).unwrap();
        let b = BinaryMask::new(g.clone(), vec![false, true, true, false]).unwrap();
        let c = BinaryMask::new(g, vec![false, false, true, true]).unwrap();
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let other = BinaryMask::new(grid([2, 2, 1]), vec![true; 4]).unwrap();
        assert!(matches!(dice(&a, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn slabs_offset() {
        let g = Grid::new([6, 5, 12], [1.0, 1.0, 0.5], [0.0; 3]).unwrap();
        let slab = |k0: usize| {
            let data = (0..g.len()).map(|n| g.coords(n)[2] == k0).collect();
            BinaryMask::new(g.clone(), data).unwrap()
        };
        let a = slab(2);
        let b = slab(7);
        assert_eq!(hausdorff(&a, &b, 100.0).unwrap(), 2.5);
        assert_eq!(hausdorff(&a, &b, 95.0).unwrap(), 2.5);
        assert_eq!(hausdorff(&a, &a, 100.0).unwrap(), 0.0);
        let empty = BinaryMask::new(g.clone(), vec![false; g.len()]).unwrap();
        assert!(matches!(hausdorff(&a, &empty, 95.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn nearest_rank_convention() {
        let mut v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&mut v, 95.0), 19.0);
        assert_eq!(nearest_rank(&mut v, 100.0), 20.0);
    }

    #[test]
    fn noiseless_phantom_is_two_valued() {
        let mut spec = PhantomSpec::<f64>::unit_square_ellipse(1);
        spec.background.sd = 0.0;
        spec.foreground.sd = 0.0;
        let (img, mask) = synth_phantom(&spec).unwrap();
        for (v, m) in img.data.iter().zip(&mask.data) {
            assert_eq!(*v, if *m { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn round_ellipse_is_circle() {
        let mut spec = PhantomSpec::<f64>::unit_square_ellipse(1);
        spec.geometry = PhantomGeometry::Ellipse {
            center: [0.4, 0.55],
            semi_axes: [0.2, 0.2],
            angle: 1.1,
        };
        let mask = phantom_mask(&spec).unwrap();
        for n in 0..spec.grid.len() {
            let x = spec.grid.position(n);
            let r2 = (x[0] - 0.4).powi(2) + (x[1] - 0.55).powi(2);
            if (r2 - 0.04).abs() > 1e-12 {
                assert_eq!(mask.data[n], r2 < 0.04);
            }
        }
    }
}
