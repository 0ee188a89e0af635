use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use logshape::appearance::IntensityParams;
use logshape::cochlea::{cochlea_shape, default_initial_params, CochleaConfig};
use logshape::inference::FitConfig;
use logshape::shape::{Bound, CircleShape, ShapeFunction};
use logshape::volume::{Grid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Cochlea,
    Circle,
}

/// Everything `fit` and `sweep-lref` read from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overridden by `--shape`.
    pub shape: Option<ShapeKind>,
    /// Initial shape parameters; shape default when absent.
    pub theta_s0: Option<Vec<f64>>,
    /// Initial intensity mixture; see `default_intensity`.
    pub intensity: Option<IntensityParams<f64>>,
    pub fit: FitConfig<f64>,
    pub cochlea: CochleaConfig<f64>,
    /// Circle parameter bounds `[cx, cy, radius]`; derived from the grid when absent.
    pub circle_bounds: Option<[Bound<f64>; 3]>,
}

impl RunConfig {
    /// Defaults with every optional field filled in, for `config --defaults`.
    pub fn resolved_defaults() -> Self {
        Self {
            shape: Some(ShapeKind::Cochlea),
            theta_s0: Some(default_initial_params()),
            intensity: Some(IntensityParams::ct_default()),
            ..Self::default()
        }
    }
}

/// TOML, or JSON when the file ends in `.json` or starts with `{`.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing TOML {}", path.display()))
    }
}

pub fn build_shape(kind: ShapeKind, config: &RunConfig, grid: &Grid<f64>) -> Result<Box<dyn ShapeFunction<f64>>> {
    Ok(match kind {
        ShapeKind::Cochlea => Box::new(cochlea_shape(config.cochlea.clone())?),
        ShapeKind::Circle => {
            let bounds = match config.circle_bounds {
                Some(b) => b,
                None => circle_bounds(grid)?,
            };
            Box::new(CircleShape::new(bounds)?)
        }
    })
}

fn extent(grid: &Grid<f64>, axis: usize) -> (f64, f64) {
    let lo = grid.origin[axis];
    (lo, lo + (grid.dims[axis] - 1) as f64 * grid.spacing[axis])
}

/// Centre anywhere in the grid's xy extent, radius from one voxel to 3/4 of the larger side.
fn circle_bounds(grid: &Grid<f64>) -> Result<[Bound<f64>; 3]> {
    let (x0, x1) = extent(grid, 0);
    let (y0, y1) = extent(grid, 1);
    let h = grid.spacing[0].min(grid.spacing[1]);
    let side = (x1 - x0).max(y1 - y0);
    if side <= h {
        bail!("circle needs a grid with more than one voxel in x or y");
    }
    Ok([Bound::new(x0, x1)?, Bound::new(y0, y1)?, Bound::new(h, 0.75 * side)?])
}

/// The default reference lengths are in mm for CT. For the circle they are
/// replaced by the in-plane voxel spacing unless the config changed them.
pub fn adapt_lengths(kind: ShapeKind, config: &mut RunConfig, grid: &Grid<f64>) {
    if kind != ShapeKind::Circle {
        return;
    }
    let defaults = FitConfig::<f64>::default();
    let h = grid.spacing[0].min(grid.spacing[1]);
    if config.fit.l_ref == defaults.l_ref {
        config.fit.l_ref = h;
    }
    if config.fit.l_ref_hard == defaults.l_ref_hard {
        config.fit.l_ref_hard = None;
    }
}

pub fn initial_theta(kind: ShapeKind, config: &RunConfig, grid: &Grid<f64>) -> Vec<f64> {
    if let Some(t) = &config.theta_s0 {
        return t.clone();
    }
    match kind {
        ShapeKind::Cochlea => default_initial_params(),
        ShapeKind::Circle => {
            let (x0, x1) = extent(grid, 0);
            let (y0, y1) = extent(grid, 1);
            vec![0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.25 * (x1 - x0).min(y1 - y0)]
        }
    }
}

/// CT means for the cochlea; for the circle, a two-cluster split of the image
/// intensities with the smaller cluster as foreground.
pub fn default_intensity(kind: ShapeKind, config: &RunConfig, image: &Volume<f64>) -> IntensityParams<f64> {
    if let Some(p) = &config.intensity {
        return p.clone();
    }
    match kind {
        ShapeKind::Cochlea => IntensityParams::ct_default(),
        ShapeKind::Circle => two_means(&image.data),
    }
}

fn two_means(data: &[f64]) -> IntensityParams<f64> {
    let (mut lo, mut hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut split = (0usize, 0usize, 0.0f64);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &v in data {
            if v < mid {
                s0 += v;
                n0 += 1;
            } else {
                s1 += v;
                n1 += 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            break;
        }
        let (a, b) = (s0 / n0 as f64, s1 / n1 as f64);
        let ss: f64 = data
            .iter()
            .map(|&v| if v < mid { (v - a).powi(2) } else { (v - b).powi(2) })
            .sum();
        split = (n0, n1, (ss / data.len() as f64).sqrt());
        if a == lo && b == hi {
            break;
        }
        lo = a;
        hi = b;
    }
    let sigma = if split.2 > 0.0 { split.2 } else { 1.0 };
    if split.0 >= split.1 {
        IntensityParams::from_means(&[lo], &[hi], sigma, 1e4)
    } else {
        IntensityParams::from_means(&[hi], &[lo], sigma, 1e4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::resolved_defaults();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = toml::from_str("shape = \"circle\"\n[fit]\nl_ref = 0.01\n").unwrap();
        assert_eq!(c.shape, Some(ShapeKind::Circle));
        assert_eq!(c.fit.l_ref, 0.01);
        assert_eq!(c.fit.max_iterations, FitConfig::<f64>::default().max_iterations);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("lref = 0.1\n").is_err());
    }

    #[test]
    fn circle_lengths_follow_the_grid() {
        let grid = Grid::new([101, 101, 1], [0.01, 0.01, 1.0], [0.0; 3]).unwrap();
        let mut c = RunConfig::default();
        adapt_lengths(ShapeKind::Circle, &mut c, &grid);
        assert_eq!(c.fit.l_ref, 0.01);
        assert_eq!(c.fit.l_ref_hard, None);

        let mut c: RunConfig = toml::from_str("[fit]\nl_ref = 0.05\n").unwrap();
        adapt_lengths(ShapeKind::Circle, &mut c, &grid);
        assert_eq!(c.fit.l_ref, 0.05);

        let mut c = RunConfig::default();
        adapt_lengths(ShapeKind::Cochlea, &mut c, &grid);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn two_means_puts_minority_in_foreground() {
        let mut data = vec![0.0; 80];
        data.extend(vec![10.0; 20]);
        let p = two_means(&data);
        assert_eq!(p.foreground[0].mu, 10.0);
        assert_eq!(p.background[0].mu, 0.0);
    }
}
