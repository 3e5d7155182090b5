use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use structcov::experiment::{crb_curve, estimate_once, fmt_num, run_experiment, simulate_once, ExperimentConfig};
use structcov::geometry::{coarray, nested_completion, ArrayGeometry};
use structcov::metrics::errors;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "structcov", version, about = "Gridless structured covariance DoA experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the snapshots of one trial as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run every estimator on one trial and print the directions.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo sweep: summary, per-trial and optional spectrum/trace CSVs.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write an RMSE plot.
        #[arg(long)]
        svg: bool,
    },
    /// Stochastic CRB over the sweep axis.
    Crb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coarray report for a geometry.
    DescribeGeometry {
        #[arg(long, conflicts_with = "positions", required_unless_present = "positions")]
        config: Option<PathBuf>,
        /// Comma-separated sensor positions, e.g. "0,1,2,3,7,11".
        #[arg(long)]
        positions: Option<String>,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn classify(err: anyhow::Error) -> Failure {
    let code = match err.downcast_ref::<structcov::Error>() {
        Some(structcov::Error::Config { .. }) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    };
    Failure { code, err }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| classify(e.into()))?;
    if let Some(s) = common.seed {
        cfg.experiment.seed = s;
    }
    Ok(cfg)
}

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(|err| Failure { code: EXIT_RUNTIME, err })
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(common: &Common, out: &Path, trial: usize) -> Result<(), Failure> {
    let cfg = load(common)?;
    let y = simulate_once(&cfg, trial).map_err(|e| classify(e.into()))?;
    let mut rows = Vec::new();
    for j in 0..y.data.cols() {
        for i in 0..y.data.rows() {
            let z = y.data[(i, j)];
            rows.push(vec![i.to_string(), j.to_string(), fmt_num(z.re), fmt_num(z.im)]);
        }
    }
    let path = out.join(format!("{}_snapshots.csv", cfg.experiment.name));
    runtime(write_rows(&path, &["sensor", "snapshot", "re", "im"].map(String::from), &rows))?;
    println!("{}", path.display());
    Ok(())
}

fn estimate(common: &Common, trial: usize, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(common)?;
    let recs = estimate_once(&cfg, trial).map_err(|e| classify(e.into()))?;
    let truth = &cfg.scene.u;
    let mut rows = Vec::new();
    for r in &recs {
        match &r.outcome {
            Ok(e) => {
                let u: Vec<String> = e.u.iter().map(|x| format!("{x:+.6}")).collect();
                let worst = errors(e, truth).map(|v| v.iter().fold(0.0f64, |a, b| a.max(b.abs()))).unwrap_or(f64::NAN);
                println!("{:<10} u = [{}]  max |err| = {worst:.3e}", r.estimator.name(), u.join(", "));
                for (i, x) in e.u.iter().enumerate() {
                    rows.push(vec![r.estimator.name().into(), (i + 1).to_string(), fmt_num(*x)]);
                }
            }
            Err(m) => {
                println!("{:<10} failed: {m}", r.estimator.name());
                rows.push(vec![r.estimator.name().into(), "0".into(), fmt_num(f64::NAN)]);
            }
        }
    }
    if let Some(dir) = out {
        let path = dir.join(format!("{}_estimate.csv", cfg.experiment.name));
        runtime(write_rows(&path, &["estimator", "index", "u"].map(String::from), &rows))?;
    }
    Ok(())
}

fn sweep(common: &Common, out: &Path, jobs: Option<usize>, svg: bool) -> Result<(), Failure> {
    let cfg = load(common)?;
    let res = run_experiment(&cfg, jobs).map_err(|e| classify(e.into()))?;
    let paths = res.write(out, svg).map_err(|e| classify(e.into()))?;
    println!("{:>12} {:<10} {:>12} {:>12} {:>8}", cfg.sweep.axis.name(), "estimator", "rmse", "crb", "failed");
    for r in &res.summary {
        println!("{:>12} {:<10} {:>12.4e} {:>12.4e} {:>5}/{}", r.axis, r.estimator.name(), r.rmse, r.crb, r.failures, r.trials);
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn crb(common: &Common, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(common)?;
    let curve = crb_curve(&cfg).map_err(|e| classify(e.into()))?;
    let k = cfg.scene.u.len();
    let mut rows = Vec::new();
    for (x, b) in curve {
        let b = b.unwrap_or_else(|_| vec![f64::NAN; k]);
        let rmse = (b.iter().sum::<f64>() / k as f64).sqrt();
        println!("{} = {x}: crb rmse {rmse:.4e}", cfg.sweep.axis.name());
        let mut row = vec![fmt_num(x), fmt_num(rmse)];
        row.extend(b.iter().map(|&v| fmt_num(v)));
        rows.push(row);
    }
    if let Some(dir) = out {
        let mut header = vec![cfg.sweep.axis.name().to_string(), "crb_rmse".into()];
        header.extend((1..=k).map(|i| format!("crb_{i}")));
        let path = dir.join(format!("{}_crb.csv", cfg.experiment.name));
        runtime(write_rows(&path, &header, &rows))?;
    }
    Ok(())
}

fn describe(config: Option<&Path>, positions: Option<&str>) -> Result<(), Failure> {
    let g = match (config, positions) {
        (Some(p), _) => {
            let cfg = ExperimentConfig::load(p).map_err(|e| classify(e.into()))?;
            cfg.geometry().map_err(|e| classify(e.into()))?
        }
        (None, Some(lit)) => ArrayGeometry::parse(lit).map_err(|e| Failure {
            code: EXIT_CONFIG,
            err: anyhow::Error::new(e).context("--positions"),
        })?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    println!("sensors:    {}", g.len());
    println!("positions:  {:?}", g.positions());
    if !g.on_grid() {
        println!("off-grid positions: no difference coarray on the integer lattice");
        return Ok(());
    }
    let lag = coarray(&g).map_err(|e| classify(e.into()))?;
    println!("aperture:   {}", lag.aperture);
    println!("lags (>=0): {:?}", lag.nonneg);
    println!("contiguous: 0..{} ({} lags)", lag.contiguous.saturating_sub(1), lag.contiguous);
    println!("holes:      {:?}", lag.holes);
    match nested_completion(&g) {
        Ok(extra) => println!("nested completion adds: {extra:?}"),
        Err(e) => println!("nested completion unavailable: {e}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Simulate { common, out, trial } => simulate(common, out, *trial),
        Command::Estimate { common, trial, out } => estimate(common, *trial, out.as_deref()),
        Command::Sweep { common, out, jobs, svg } => sweep(common, out, *jobs, *svg),
        Command::Crb { common, out } => crb(common, out.as_deref()),
        Command::DescribeGeometry { config, positions } => describe(config.as_deref(), positions.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
