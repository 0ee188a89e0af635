//! `logshape` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ShapeKind;

#[derive(Debug, Parser)]
#[command(name = "logshape", version, about = "Logistic shape model segmentation")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the command summary as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom image and its ground-truth mask.
    Synth(SynthArgs),
    /// Fit a shape model to an image.
    Fit(FitArgs),
    /// Fit once per reference length and tabulate log-joint and Dice.
    SweepLref(SweepArgs),
    /// Monte-Carlo marginal posterior from a previous fit's Laplace posterior.
    SamplePosterior(SampleArgs),
    /// Dice and symmetric 95%/100% Hausdorff distance between two masks.
    Metrics(MetricsArgs),
    /// Shape-function utilities.
    Shape {
        #[command(subcommand)]
        command: ShapeCommand,
    },
    /// Print configuration defaults.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Phantom spec (TOML or JSON); see README.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in phantom instead of a spec file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Noise seed; overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for image.mhd, truth.mhd and spec.toml.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Preset {
    /// 128×128 ellipse in the unit square.
    Ellipse,
    /// 60×50×50 cochlea at 0.2 mm.
    Cochlea,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input image (.mhd).
    #[arg(long)]
    image: PathBuf,
    /// Shape model; overrides `shape` in the config.
    #[arg(long, value_enum)]
    shape: Option<ShapeKind>,
    /// Run configuration (TOML or JSON); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for posterior/prior volumes, masks, posterior.json and trace.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Ground-truth mask; adds Dice and Hausdorff to the summary.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum)]
    shape: Option<ShapeKind>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference lengths as start:step:stop, e.g. 0.05:0.05:0.25.
    #[arg(long, value_parser = parse_range)]
    grid: LrefGrid,
    /// Ground-truth mask for the Dice columns.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct LrefGrid(pub Vec<f64>);

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = logshape::uncertainty::DEFAULT_SAMPLES)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output volume (.mhd).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Debug, Subcommand)]
enum ShapeCommand {
    /// Sample a shape function on a grid.
    Sdf(SdfArgs),
}

#[derive(Debug, Args)]
pub struct SdfArgs {
    /// Parameter file (TOML or JSON); see README.
    #[arg(long)]
    params: PathBuf,
    /// NX,NY,NZ,SPACING (mm).
    #[arg(long, value_parser = parse_grid)]
    grid: GridArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub struct GridArg {
    pub dims: [usize; 3],
    pub spacing: f64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Print the run-config defaults (TOML, or JSON with --json).
    #[arg(long, required = true)]
    defaults: bool,
}

fn parse_range(s: &str) -> Result<LrefGrid, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [start, step, stop] = parts[..] else {
        return Err("expected start:step:stop".into());
    };
    if !(start > 0.0 && step > 0.0 && stop >= start) {
        return Err("need 0 < start <= stop and step > 0".into());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok(LrefGrid((0..n).map(|i| start + step * i as f64).collect()))
}

fn parse_grid(s: &str) -> Result<GridArg, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err("expected NX,NY,NZ,SPACING".into());
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|e| format!("`{p}`: {e}"))?;
        if *d == 0 {
            return Err("dimensions must be >= 1".into());
        }
    }
    let spacing: f64 = parts[3].parse().map_err(|e| format!("`{}`: {e}", parts[3]))?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err("spacing must be > 0".into());
    }
    Ok(GridArg { dims, spacing })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let json = cli.json;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, json),
        Command::Fit(a) => commands::fit(&a, json),
        Command::SweepLref(a) => commands::sweep(&a, json),
        Command::SamplePosterior(a) => commands::sample(&a, json),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Shape {
            command: ShapeCommand::Sdf(a),
        } => commands::sdf(&a, json),
        Command::Config(a) => commands::config(&a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
