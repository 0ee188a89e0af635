use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use logshape::appearance::IntensityParams;
use logshape::cochlea::{default_center, CochleaConfig};
use logshape::eval::{dice, hausdorff, lref_sweep, sweep_csv, synth_phantom, PhantomSpec};
use logshape::inference::{fit as run_fit, trace_csv, ShapePosterior};
use logshape::io::{read_mask, read_volume, write_mask, write_volume};
use logshape::linalg::SquareMatrix;
use logshape::shape::{Bound, ReferenceLength};
use logshape::uncertainty::{marginal_posterior, sample_posterior};
use logshape::volume::{BinaryMask, Grid, Volume};

use crate::config::{adapt_lengths, build_shape, default_intensity, initial_theta, load, RunConfig, ShapeKind};
use crate::{ConfigArgs, FitArgs, MetricsArgs, Preset, SampleArgs, SdfArgs, SweepArgs, SynthArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_summary<S: Serialize>(json: bool, summary: &S, human: &str) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string(summary)?);
    } else {
        println!("{human}");
    }
    Ok(())
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load(p),
        None => Ok(RunConfig::default()),
    }
}

fn shape_kind(flag: Option<ShapeKind>, config: &RunConfig) -> Result<ShapeKind> {
    flag.or(config.shape)
        .context("no shape model: pass --shape or set `shape` in the config")
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    image: PathBuf,
    truth: PathBuf,
    foreground_voxels: usize,
    seed: u64,
}

pub fn synth(args: &SynthArgs, json: bool) -> Result<()> {
    let mut spec: PhantomSpec<f64> = match (&args.spec, args.preset) {
        (Some(p), _) => load(p)?,
        (None, Some(Preset::Ellipse)) => PhantomSpec::unit_square_ellipse(7),
        (None, Some(Preset::Cochlea)) => PhantomSpec::cochlea_phantom(11),
        (None, None) => bail!("pass --spec or --preset"),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (image, truth) = synth_phantom(&spec)?;
    create_dir(&args.out_dir)?;
    let image_path = args.out_dir.join("image.mhd");
    let truth_path = args.out_dir.join("truth.mhd");
    write_volume(&image, &image_path)?;
    write_mask(&truth, &truth_path)?;
    write_text(&args.out_dir.join("spec.toml"), &toml::to_string_pretty(&spec)?)?;
    let summary = SynthSummary {
        image: image_path,
        truth: truth_path,
        foreground_voxels: truth.count(),
        seed: spec.seed,
    };
    let human = format!(
        "wrote {} and {} ({} foreground voxels, seed {})",
        summary.image.display(),
        summary.truth.display(),
        summary.foreground_voxels,
        summary.seed
    );
    print_summary(json, &summary, &human)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metrics {
    dice: f64,
    hd95: Option<f64>,
    hd100: Option<f64>,
}

fn mask_metrics(a: &BinaryMask<f64>, b: &BinaryMask<f64>) -> Result<Metrics> {
    let empty = a.count() == 0 || b.count() == 0;
    let hd = |p: f64| -> Result<Option<f64>> {
        if empty {
            Ok(None)
        } else {
            Ok(Some(hausdorff(a, b, p)?))
        }
    };
    Ok(Metrics {
        dice: dice(a, b)?,
        hd95: hd(95.0)?,
        hd100: hd(100.0)?,
    })
}

/// Contents of `posterior.json`; `sample-posterior` reads it back.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitRecord {
    shape: ShapeKind,
    image: PathBuf,
    parameters: BTreeMap<String, f64>,
    names: Vec<String>,
    theta: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    bounds: Vec<Bound<f64>>,
    log_joint: f64,
    iterations: usize,
    intensity: IntensityParams<f64>,
    config: RunConfig,
    sroi: Option<Metrics>,
    ssi: Option<Metrics>,
}

pub fn fit(args: &FitArgs, json: bool) -> Result<()> {
    let mut config = run_config(args.config.as_deref())?;
    let kind = shape_kind(args.shape, &config)?;
    config.shape = Some(kind);
    let image: Volume<f64> = read_volume(&args.image)?;
    adapt_lengths(kind, &mut config, &image.grid);
    let truth: Option<BinaryMask<f64>> = args.truth.as_deref().map(read_mask).transpose()?;
    let shape = build_shape(kind, &config, &image.grid)?;
    let theta0 = initial_theta(kind, &config, &image.grid);
    let intensity0 = default_intensity(kind, &config, &image);
    config.theta_s0 = Some(theta0.clone());
    config.intensity = Some(intensity0.clone());

    let r = run_fit(&image, shape.as_ref(), &theta0, &intensity0, &config.fit)?;

    create_dir(&args.out_dir)?;
    let out = &args.out_dir;
    write_volume(r.responsibilities.volume(), out.join("posterior.mhd"))?;
    write_volume(&r.prior, out.join("prior.mhd"))?;
    write_mask(&r.sroi, out.join("sroi.mhd"))?;
    write_mask(&r.ssi, out.join("ssi.mhd"))?;
    write_text(&out.join("trace.csv"), &trace_csv(&r.posterior.names, &r.trace))?;

    let (sroi, ssi) = match &truth {
        Some(t) => (Some(mask_metrics(&r.sroi, t)?), Some(mask_metrics(&r.ssi, t)?)),
        None => (None, None),
    };
    let record = FitRecord {
        shape: kind,
        image: fs::canonicalize(&args.image).unwrap_or_else(|_| args.image.clone()),
        parameters: r
            .posterior
            .names
            .iter()
            .cloned()
            .zip(r.posterior.theta.iter().copied())
            .collect(),
        names: r.posterior.names.clone(),
        theta: r.posterior.theta.clone(),
        covariance: r.posterior.covariance.rows(),
        bounds: r.posterior.bounds.clone(),
        log_joint: r.log_joint,
        iterations: r.trace.len() - 1,
        intensity: r.intensity.clone(),
        config,
        sroi,
        ssi,
    };
    write_text(&out.join("posterior.json"), &serde_json::to_string_pretty(&record)?)?;

    let mut human = format!(
        "log-joint {:.6} after {} iterations\n",
        record.log_joint, record.iterations
    );
    for (n, v) in record.names.iter().zip(&record.theta) {
        human.push_str(&format!("  {n} = {v:.6}\n"));
    }
    if let (Some(a), Some(b)) = (&record.sroi, &record.ssi) {
        human.push_str(&format!("  Dice SROI {:.4}, SSI {:.4}\n", a.dice, b.dice));
    }
    human.push_str(&format!("outputs in {}", out.display()));
    print_summary(json, &record, &human)
}

pub fn sweep(args: &SweepArgs, json: bool) -> Result<()> {
    let mut config = run_config(args.config.as_deref())?;
    let kind = shape_kind(args.shape, &config)?;
    let image: Volume<f64> = read_volume(&args.image)?;
    adapt_lengths(kind, &mut config, &image.grid);
    let truth: Option<BinaryMask<f64>> = args.truth.as_deref().map(read_mask).transpose()?;
    let shape = build_shape(kind, &config, &image.grid)?;
    let theta0 = initial_theta(kind, &config, &image.grid);
    let intensity0 = default_intensity(kind, &config, &image);
    let rows = lref_sweep(
        &image,
        shape.as_ref(),
        &theta0,
        &intensity0,
        &config.fit,
        &args.grid.0,
        truth.as_ref(),
    )?;
    write_text(&args.out, &sweep_csv(&rows))?;
    let best = rows
        .iter()
        .filter_map(|r| r.log_joint.map(|lj| (r.l_ref, lj)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let human = match best {
        Some((l, lj)) => format!(
            "{} reference lengths ({failed} failed); best log-joint {lj:.6} at l_ref {l}; wrote {}",
            rows.len(),
            args.out.display()
        ),
        None => format!("all {} fits failed; wrote {}", rows.len(), args.out.display()),
    };
    print_summary(json, &rows, &human)
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    out: PathBuf,
    n: usize,
    seed: u64,
    clipped: usize,
    expected_foreground_volume: f64,
}

pub fn sample(args: &SampleArgs, json: bool) -> Result<()> {
    let record: FitRecord = load(&args.fit.join("posterior.json"))?;
    let image: Volume<f64> = read_volume(&record.image)?;
    let shape = build_shape(record.shape, &record.config, &image.grid)?;
    let posterior = ShapePosterior {
        names: record.names.clone(),
        theta: record.theta.clone(),
        covariance: SquareMatrix::from_rows(&record.covariance)?,
        bounds: record.bounds.clone(),
    };
    let samples = sample_posterior(&posterior, args.n, args.seed)?;
    let fit = &record.config.fit;
    let l_ref = ReferenceLength::new(fit.l_ref_hard.unwrap_or(fit.l_ref))?;
    let map = marginal_posterior(&image, shape.as_ref(), &samples, &record.intensity, l_ref)?;
    write_volume(&map, &args.out)?;
    let summary = SampleSummary {
        out: args.out.clone(),
        n: args.n,
        seed: args.seed,
        clipped: samples.clipped,
        expected_foreground_volume: map.data.iter().sum::<f64>() * image.grid.voxel_volume(),
    };
    let human = format!(
        "{} draws (seed {}, {} clipped to bounds); expected foreground volume {:.4}; wrote {}",
        summary.n,
        summary.seed,
        summary.clipped,
        summary.expected_foreground_volume,
        summary.out.display()
    );
    print_summary(json, &summary, &human)
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let a: BinaryMask<f64> = read_mask(&args.a)?;
    let b: BinaryMask<f64> = read_mask(&args.b)?;
    println!("{}", serde_json::to_string(&mask_metrics(&a, &b)?)?);
    Ok(())
}

/// Parameter file of `shape sdf`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SdfParams {
    shape: ShapeKind,
    theta: Vec<f64>,
    #[serde(default)]
    cochlea: CochleaConfig<f64>,
    circle_bounds: Option<[Bound<f64>; 3]>,
    /// Grid centre, mm; the default tube's bounding-box centre for the cochlea,
    /// (0.5, 0.5, 0) for the circle.
    center: Option<[f64; 3]>,
}

#[derive(Debug, Serialize)]
struct SdfSummary {
    out: PathBuf,
    inside_voxels: usize,
    min: f64,
    max: f64,
}

pub fn sdf(args: &SdfArgs, json: bool) -> Result<()> {
    let params: SdfParams = load(&args.params)?;
    let center = params.center.unwrap_or(match params.shape {
        ShapeKind::Cochlea => default_center(),
        ShapeKind::Circle => [0.5, 0.5, 0.0],
    });
    let grid = Grid::centered(args.grid.dims, args.grid.spacing, center)?;
    let config = RunConfig {
        cochlea: params.cochlea,
        circle_bounds: params.circle_bounds,
        ..RunConfig::default()
    };
    let shape = build_shape(params.shape, &config, &grid)?;
    let values = shape.evaluate_points(&params.theta, &grid.positions())?;
    let volume = Volume::new(grid, values)?;
    write_volume(&volume, &args.out)?;
    let summary = SdfSummary {
        out: args.out.clone(),
        inside_voxels: volume.data.iter().filter(|&&v| v >= 0.0).count(),
        min: volume.data.iter().copied().fold(f64::INFINITY, f64::min),
        max: volume.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let human = format!(
        "{} voxels inside, values in [{:.4}, {:.4}]; wrote {}",
        summary.inside_voxels,
        summary.min,
        summary.max,
        summary.out.display()
    );
    print_summary(json, &summary, &human)
}

pub fn config(_args: &ConfigArgs, json: bool) -> Result<()> {
    let defaults = RunConfig::resolved_defaults();
    if json {
        println!("{}", serde_json::to_string_pretty(&defaults)?);
    } else {
        print!("{}", toml::to_string_pretty(&defaults)?);
    }
    Ok(())
}
