//! Declarative Monte-Carlo experiments: TOML configs, parallel trials and
//! CSV/SVG artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimate::{method1, method1_matrix, method2_matrix, music_peaks, music_spectrum, music_spectrum_on, root_music, root_music_on, DoaEstimate};
use crate::geometry::{coarray, structured_matrix, ArrayGeometry};
use crate::metrics::{crb_stochastic, empirical_bias, errors, rmse_u};
use crate::mlesolve::{em_gridless_traced, structcov_mle_traced, CompletionPlan, MleConfig};
use crate::numerics::CMatrix;
use crate::refine::{multires_refine, sbl_estimate, AdjustConfig, RefineConfig, RoundInfo};
use crate::sbl::{sbl_run, uniform_grid, SblConfig};
use crate::sigmodel::{fb_average, scm, simulate_trial, SnapshotMatrix, SourceScene};

/// Grid used for spectrum peak picking when root-MUSIC is unavailable.
const PEAK_GRID: usize = 8192;

fn config_err<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SingleSnapshot,
    MoreSources,
    CorrelationSweep,
    SnrSweep,
    Resolution,
    RefineArbitrary,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Root-MUSIC on the sample covariance.
    Scm,
    /// Root-MUSIC on the forward-backward averaged sample covariance.
    Fb,
    /// Structured ML (Method I when there are at least as many sources as sensors).
    Structcov,
    /// Structured ML on the spatially smoothed covariance.
    Method2,
    /// EM interpolation of the nested completion of the array.
    Em,
    /// Grid SBL, top peaks.
    Sbl,
    /// SBL with peak adjustment and multi-resolution refinement.
    Refine,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Scm => "scm",
            Estimator::Fb => "fb",
            Estimator::Structcov => "structcov",
            Estimator::Method2 => "method2",
            Estimator::Em => "em",
            Estimator::Sbl => "sbl",
            Estimator::Refine => "refine",
        }
    }

    fn needs_grid_positions(self) -> bool {
        matches!(self, Estimator::Structcov | Estimator::Method2 | Estimator::Em)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[default]
    None,
    SnrDb,
    RhoAbs,
    Snapshots,
    LambdaM,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::None => "point",
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::RhoAbs => "rho_abs",
            SweepAxis::Snapshots => "snapshots",
            SweepAxis::LambdaM => "lambda_m",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub kind: ExperimentKind,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of the three layouts.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub positions: Option<Vec<f64>>,
    pub ula: Option<usize>,
    /// `[inner, outer]` sensor counts.
    pub nested: Option<[usize; 2]>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub u: Vec<f64>,
    /// One value for all sources or one per source.
    pub snr_db: Vec<f64>,
    pub snapshots: usize,
    #[serde(default)]
    pub rho_abs: f64,
    #[serde(default)]
    pub rho_phase: f64,
    #[serde(default = "default_pair")]
    pub rho_pair: [usize; 2],
    #[serde(default = "one")]
    pub noise_var: f64,
}

fn default_pair() -> [usize; 2] {
    [0, 1]
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub list: Vec<Estimator>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Defaults to `scene.noise_var`.
    pub lambda: Option<f64>,
    /// Defaults to `1e3 * lambda`.
    pub lambda_m: Option<f64>,
    pub iters: usize,
    pub inner_iters: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            lambda: None,
            lambda_m: None,
            iters: 20,
            inner_iters: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SblSection {
    pub grid: usize,
    pub iters: usize,
    pub tol: f64,
}

impl Default for SblSection {
    fn default() -> Self {
        Self {
            grid: 150,
            iters: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub g0: usize,
    pub g_factor: usize,
    pub rounds: usize,
    pub gamma_thresh: f64,
    pub warm_start: bool,
    pub fine_points: usize,
    pub max_sweeps: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        let a = AdjustConfig::default();
        Self {
            g0: 150,
            g_factor: 3,
            rounds: 5,
            gamma_thresh: 1e-3,
            warm_start: false,
            fine_points: a.g_fine,
            max_sweeps: a.max_sweeps,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write per-trial pseudospectra.
    pub spectrum: bool,
    pub spectrum_points: usize,
    /// Write per-iteration ML costs of the structured solvers.
    pub trace: bool,
    pub svg: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            spectrum: false,
            spectrum_points: 512,
            trace: false,
            svg: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub geometry: GeometrySection,
    pub scene: SceneSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub estimators: EstimatorSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sbl: SblSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Everything needed to run trials at one sweep value.
#[derive(Clone, Debug)]
pub struct PointSetup {
    pub axis: f64,
    pub scene: SourceScene,
    pub snapshots: usize,
    pub mle: MleConfig,
    pub sbl: SblConfig,
    pub sbl_grid: usize,
    pub refine: RefineConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            key: "<document>".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "--config".into(),
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.name.is_empty() || !e.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return config_err("experiment.name", "must be a nonempty [A-Za-z0-9_-] identifier");
        }
        if e.trials == 0 {
            return config_err("experiment.trials", "must be at least 1");
        }
        let g = self.geometry()?;
        let s = &self.scene;
        if s.u.is_empty() {
            return config_err("scene.u", "needs at least one source");
        }
        if s.u.iter().any(|u| !(-1.0..1.0).contains(u)) {
            return config_err("scene.u", "directions must lie in [-1, 1)");
        }
        if s.u.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("scene.u", "directions must be strictly increasing");
        }
        if s.snr_db.len() != 1 && s.snr_db.len() != s.u.len() {
            return config_err("scene.snr_db", format!("needs 1 or {} values, got {}", s.u.len(), s.snr_db.len()));
        }
        if s.snapshots == 0 {
            return config_err("scene.snapshots", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&s.rho_abs) {
            return config_err("scene.rho_abs", "must lie in [0, 1]");
        }
        if !(s.noise_var > 0.0) {
            return config_err("scene.noise_var", "must be positive");
        }
        if s.rho_abs > 0.0 && (s.rho_pair[0] == s.rho_pair[1] || s.rho_pair.iter().any(|&i| i >= s.u.len())) {
            return config_err("scene.rho_pair", "must name two distinct sources");
        }
        let w = &self.sweep;
        if w.axis != SweepAxis::None && w.values.is_empty() {
            return config_err("sweep.values", format!("must be nonempty for axis `{}`", w.axis.name()));
        }
        if w.axis == SweepAxis::None && !w.values.is_empty() {
            return config_err("sweep.axis", "values given without an axis");
        }
        for &x in &w.values {
            let ok = match w.axis {
                SweepAxis::None => true,
                SweepAxis::SnrDb => x.is_finite(),
                SweepAxis::RhoAbs => (0.0..=1.0).contains(&x),
                SweepAxis::Snapshots => x >= 1.0 && x.fract() == 0.0,
                SweepAxis::LambdaM => x > 0.0,
            };
            if !ok {
                return config_err("sweep.values", format!("{x} is not valid for axis `{}`", w.axis.name()));
            }
        }
        if self.estimators.list.is_empty() {
            return config_err("estimators.list", "must name at least one estimator");
        }
        let mut seen = self.estimators.list.clone();
        seen.sort_by_key(|e| e.name());
        seen.dedup();
        if seen.len() != self.estimators.list.len() {
            return config_err("estimators.list", "contains duplicates");
        }
        if !g.on_grid() {
            if let Some(bad) = self.estimators.list.iter().find(|e| e.needs_grid_positions()) {
                return config_err("estimators.list", format!("`{}` needs integer sensor positions", bad.name()));
            }
        }
        if self.estimators.list.contains(&Estimator::Em) {
            CompletionPlan::nested(&g).map_err(|err| Error::Config {
                key: "estimators.list".into(),
                msg: format!("`em` cannot complete this geometry: {err}"),
            })?;
        }
        let sv = &self.solver;
        if sv.lambda.is_some_and(|l| !(l > 0.0)) {
            return config_err("solver.lambda", "must be positive");
        }
        if sv.lambda_m.is_some_and(|l| !(l > 0.0)) {
            return config_err("solver.lambda_m", "must be positive");
        }
        if sv.iters == 0 {
            return config_err("solver.iters", "must be at least 1");
        }
        if sv.inner_iters == 0 {
            return config_err("solver.inner_iters", "must be at least 1");
        }
        if self.sbl.grid < 2 {
            return config_err("sbl.grid", "must be at least 2");
        }
        if self.sbl.iters == 0 {
            return config_err("sbl.iters", "must be at least 1");
        }
        if !(self.sbl.tol >= 0.0) {
            return config_err("sbl.tol", "must be nonnegative");
        }
        let r = &self.refine;
        if r.g0 < 2 {
            return config_err("refine.g0", "must be at least 2");
        }
        if r.g_factor < 2 {
            return config_err("refine.g_factor", "must be at least 2");
        }
        if r.rounds == 0 {
            return config_err("refine.rounds", "must be at least 1");
        }
        if !(r.gamma_thresh >= 0.0) {
            return config_err("refine.gamma_thresh", "must be nonnegative");
        }
        if r.fine_points < 3 {
            return config_err("refine.fine_points", "must be at least 3");
        }
        if r.max_sweeps == 0 {
            return config_err("refine.max_sweeps", "must be at least 1");
        }
        if self.output.spectrum_points < 2 {
            return config_err("output.spectrum_points", "must be at least 2");
        }
        for x in self.points() {
            self.setup(x)?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let g = &self.geometry;
        let given = [g.positions.is_some(), g.ula.is_some(), g.nested.is_some()];
        if given.iter().filter(|&&b| b).count() != 1 {
            return config_err("geometry", "set exactly one of positions, ula, nested");
        }
        let wrap = |key: &str, r: Result<ArrayGeometry>| {
            r.map_err(|e| Error::Config {
                key: key.into(),
                msg: e.to_string(),
            })
        };
        if let Some(p) = &g.positions {
            return wrap("geometry.positions", ArrayGeometry::new(p.clone()));
        }
        if let Some(m) = g.ula {
            if m == 0 {
                return config_err("geometry.ula", "must be at least 1");
            }
            return Ok(ArrayGeometry::ula(m));
        }
        let [a, b] = g.nested.unwrap();
        if a == 0 || b == 0 {
            return config_err("geometry.nested", "both subarrays need at least one sensor");
        }
        Ok(ArrayGeometry::nested(a, b))
    }

    /// Sweep values; a single `0` when there is no sweep.
    pub fn points(&self) -> Vec<f64> {
        match self.sweep.axis {
            SweepAxis::None => vec![0.0],
            _ => self.sweep.values.clone(),
        }
    }

    pub fn setup(&self, x: f64) -> Result<PointSetup> {
        let s = &self.scene;
        let k = s.u.len();
        let mut snr = if s.snr_db.len() == 1 { vec![s.snr_db[0]; k] } else { s.snr_db.clone() };
        let (mut rho, mut l) = (s.rho_abs, s.snapshots);
        let lambda = self.solver.lambda.unwrap_or(s.noise_var);
        let mut lambda_m = self.solver.lambda_m.unwrap_or(1e3 * lambda);
        match self.sweep.axis {
            SweepAxis::None => {}
            SweepAxis::SnrDb => snr = vec![x; k],
            SweepAxis::RhoAbs => rho = x,
            SweepAxis::Snapshots => l = x as usize,
            SweepAxis::LambdaM => lambda_m = x,
        }
        let mut scene = SourceScene::from_snr(s.u.clone(), &snr).map_err(|e| Error::Config {
            key: "scene".into(),
            msg: e.to_string(),
        })?;
        scene.noise_var = s.noise_var;
        scene.powers.iter_mut().for_each(|p| *p *= s.noise_var);
        scene.pair = (s.rho_pair[0], s.rho_pair[1]);
        let scene = scene.with_rho(rho, s.rho_phase).map_err(|e| Error::Config {
            key: "scene.rho_abs".into(),
            msg: e.to_string(),
        })?;
        let mut mle = MleConfig::new(lambda);
        mle.lambda_m = lambda_m;
        mle.outer_iters = self.solver.iters;
        mle.inner_iters = self.solver.inner_iters;
        let sbl = SblConfig {
            iters: self.sbl.iters,
            tol: self.sbl.tol,
        };
        let r = &self.refine;
        let refine = RefineConfig {
            g0: r.g0,
            g_factor: r.g_factor,
            gamma_thresh: r.gamma_thresh,
            rounds: r.rounds,
            lambda,
            warm_start: r.warm_start,
            sbl: sbl.clone(),
            adjust: AdjustConfig {
                g_fine: r.fine_points,
                max_sweeps: r.max_sweeps,
                ..AdjustConfig::default()
            },
        };
        Ok(PointSetup {
            axis: x,
            scene,
            snapshots: l,
            mle,
            sbl,
            sbl_grid: self.sbl.grid,
            refine,
        })
    }
}

/// One estimator applied to one trial.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub axis: f64,
    pub estimator: Estimator,
    pub trial: usize,
    pub outcome: std::result::Result<DoaEstimate, String>,
    /// ML cost per outer iteration (structured solvers only).
    pub trace: Option<Vec<f64>>,
    /// `(u, value)` samples of the normalized pseudospectrum.
    pub spectrum: Option<Vec<(f64, f64)>>,
    /// Per-round diagnostics (grid refinement only).
    pub rounds: Option<Vec<RoundInfo>>,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub axis: f64,
    pub estimator: Estimator,
    pub rmse: f64,
    pub bias: Vec<f64>,
    pub crb: f64,
    pub trials: usize,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub records: Vec<TrialRecord>,
    pub summary: Vec<SummaryRow>,
    pub wallclock_ms: f64,
    pub jobs: usize,
}

struct Extras {
    trace: bool,
    spectrum: Option<Vec<f64>>,
}

fn spectrum_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect()
}

fn music_on(r: &CMatrix, g: &ArrayGeometry, k: usize, grid: &[f64]) -> Option<Vec<(f64, f64)>> {
    let s = music_spectrum_on(r, g, k, grid).ok()?;
    Some(grid.iter().copied().zip(s).collect())
}

fn music_ula(r: &CMatrix, k: usize, grid: &[f64]) -> Option<Vec<(f64, f64)>> {
    let s = music_spectrum(r, k, grid).ok()?;
    Some(grid.iter().copied().zip(s).collect())
}

fn gamma_spectrum(grid: &[f64], gamma: &[f64]) -> Vec<(f64, f64)> {
    let top = gamma.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<(f64, f64)> = grid.iter().zip(gamma).map(|(&u, &x)| (u, if top > 0.0 { x / top } else { 0.0 })).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

type Estimated = (DoaEstimate, Option<Vec<f64>>, Option<Vec<(f64, f64)>>, Option<Vec<RoundInfo>>);

/// Root-MUSIC for integer layouts, grid MUSIC otherwise.
fn subspace_estimate(r: &CMatrix, g: &ArrayGeometry, k: usize) -> Result<DoaEstimate> {
    match g.grid_positions() {
        Ok(pos) => root_music_on(r, &pos, k),
        Err(_) => music_peaks(r, g, k, &spectrum_grid(PEAK_GRID)),
    }
}

fn run_estimator(est: Estimator, p: &PointSetup, g: &ArrayGeometry, y: &SnapshotMatrix, x: &Extras) -> Result<Estimated> {
    let k = p.scene.k();
    let grid = x.spectrum.as_deref();
    match est {
        Estimator::Scm | Estimator::Fb => {
            let mut r = scm(y);
            if est == Estimator::Fb {
                r = fb_average(&r);
            }
            let spec = grid.and_then(|gr| music_on(&r, g, k, gr));
            Ok((subspace_estimate(&r, g, k)?, None, spec, None))
        }
        Estimator::Structcov => {
            let t = structcov_mle_traced(&scm(y), g, &p.mle)?;
            let (e, spec) = if k < g.len() {
                let tv = structured_matrix(&t.v, g)?;
                (subspace_estimate(&tv, g, k)?, grid.and_then(|gr| music_on(&tv, g, k, gr)))
            } else {
                let tc = method1_matrix(&t.v, g)?;
                (method1(&t.v, g, k)?, grid.and_then(|gr| music_ula(&tc, k, gr)))
            };
            Ok((e, x.trace.then_some(t.costs), spec, None))
        }
        Estimator::Method2 => {
            if k >= coarray(g)?.contiguous {
                return Err(Error::InvalidArgument(format!("{k} sources exceed the contiguous lag count")));
            }
            let t = method2_matrix(&scm(y), g, &p.mle)?;
            Ok((root_music(&t, k)?, None, grid.and_then(|gr| music_ula(&t, k, gr)), None))
        }
        Estimator::Em => {
            let plan = CompletionPlan::nested(g)?;
            let cg = plan.complete_geometry();
            let t = em_gridless_traced(y, &plan, &p.mle)?;
            let tc = method1_matrix(&t.v, &cg)?;
            let spec = grid.and_then(|gr| music_ula(&tc, k, gr));
            Ok((method1(&t.v, &cg, k)?, x.trace.then_some(t.costs), spec, None))
        }
        Estimator::Sbl => {
            let state = sbl_run(g, &uniform_grid(p.sbl_grid), y, p.mle.lambda, &p.sbl)?;
            let spec = grid.map(|_| gamma_spectrum(&state.grid, &state.gamma));
            Ok((sbl_estimate(&state, k), None, spec, None))
        }
        Estimator::Refine => {
            let res = multires_refine(y, g, k, &p.refine)?;
            let spec = grid.map(|_| gamma_spectrum(&res.state.grid, &res.state.gamma));
            Ok((res.estimate, None, spec, Some(res.rounds)))
        }
    }
}

fn extras(cfg: &ExperimentConfig) -> Extras {
    Extras {
        trace: cfg.output.trace,
        spectrum: cfg.output.spectrum.then(|| spectrum_grid(cfg.output.spectrum_points)),
    }
}

/// All estimators on trial `t` at one sweep value.
fn trial_records(cfg: &ExperimentConfig, g: &ArrayGeometry, p: &PointSetup, x: &Extras, t: usize) -> Vec<TrialRecord> {
    let y = simulate_trial(&p.scene, g, p.snapshots, cfg.experiment.seed, t as u64);
    cfg.estimators
        .list
        .iter()
        .map(|&est| {
            let t0 = Instant::now();
            let res = y.as_ref().map_err(|e| e.clone()).and_then(|y| run_estimator(est, p, g, y, x));
            let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
            let (outcome, trace, spectrum, rounds) = match res {
                Ok((e, tr, sp, ro)) => (Ok(e), tr, sp, ro),
                Err(e) => (Err(e.to_string()), None, None, None),
            };
            TrialRecord {
                axis: p.axis,
                estimator: est,
                trial: t,
                outcome,
                trace,
                spectrum,
                rounds,
                elapsed_ms,
            }
        })
        .collect()
}

/// Run every (sweep value, trial) pair on `jobs` workers (all cores when `None`).
///
/// Results do not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let g = cfg.geometry()?;
    let setups = cfg.points().into_iter().map(|x| cfg.setup(x)).collect::<Result<Vec<_>>>()?;
    let x = extras(cfg);
    let work: Vec<(usize, usize)> = (0..setups.len()).flat_map(|a| (0..cfg.experiment.trials).map(move |t| (a, t))).collect();
    let run = || -> Vec<Vec<TrialRecord>> { work.par_iter().map(|&(a, t)| trial_records(cfg, &g, &setups[a], &x, t)).collect() };
    let (nested, jobs) = match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            (pool.install(run), n.max(1))
        }
        None => (run(), rayon::current_num_threads()),
    };
    let records: Vec<TrialRecord> = nested.into_iter().flatten().collect();
    let summary = summarize(cfg, &g, &setups, &records);
    Ok(ExperimentOutput {
        config: cfg.clone(),
        records,
        summary,
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        jobs,
    })
}

fn crb_at(p: &PointSetup, g: &ArrayGeometry) -> Option<Vec<f64>> {
    crb_stochastic(&p.scene, g, p.snapshots).ok()
}

fn summarize(cfg: &ExperimentConfig, g: &ArrayGeometry, setups: &[PointSetup], records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for p in setups {
        let truth = &p.scene.u;
        let crb = crb_at(p, g).map_or(f64::NAN, |b| (b.iter().sum::<f64>() / b.len() as f64).sqrt());
        for &est in &cfg.estimators.list {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.axis == p.axis && r.estimator == est).collect();
            let ok: Vec<DoaEstimate> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).filter(|e| e.k() == truth.len()).cloned().collect();
            let failures = rows.len() - ok.len();
            let rmse = rmse_u(&ok, truth).unwrap_or(f64::NAN);
            let bias = (0..truth.len()).map(|k| empirical_bias(&ok, truth, k).unwrap_or(f64::NAN)).collect();
            out.push(SummaryRow {
                axis: p.axis,
                estimator: est,
                rmse,
                bias,
                crb,
                trials: rows.len(),
                failures,
            });
        }
    }
    out
}

/// Twelve significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.11e}")
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

impl ExperimentOutput {
    pub fn summary_for(&self, est: Estimator) -> Vec<&SummaryRow> {
        self.summary.iter().filter(|r| r.estimator == est).collect()
    }

    /// Write all artifacts into `dir` and return their paths.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let name = &self.config.experiment.name;
        let axis = self.config.sweep.axis.name().to_string();
        let k = self.config.scene.u.len();
        let mut written = Vec::new();

        let path = dir.join(format!("{name}_summary.csv"));
        let mut header = vec![axis.clone(), "estimator".into(), "rmse".into()];
        header.extend((1..=k).map(|i| format!("bias_{i}")));
        header.extend(["crb".into(), "trials".into(), "failures".into()]);
        let rows = self.summary.iter().map(|r| {
            let mut row = vec![fmt_num(r.axis), r.estimator.name().into(), fmt_num(r.rmse)];
            row.extend(r.bias.iter().map(|&b| fmt_num(b)));
            row.extend([fmt_num(r.crb), r.trials.to_string(), r.failures.to_string()]);
            row
        });
        write_csv(&path, &header, rows)?;
        written.push(path);

        let path = dir.join(format!("{name}_trials.csv"));
        let mut header = vec![axis.clone(), "estimator".into(), "trial".into()];
        header.extend((1..=k).map(|i| format!("u_{i}")));
        header.extend((1..=k).map(|i| format!("err_{i}")));
        header.push("error".into());
        let truth = &self.config.scene.u;
        let rows = self.records.iter().map(|r| {
            let mut row = vec![fmt_num(r.axis), r.estimator.name().into(), r.trial.to_string()];
            let assigned = r.outcome.as_ref().ok().and_then(|e| errors(e, truth).ok());
            match assigned {
                Some(err) => {
                    row.extend(err.iter().zip(truth).map(|(e, u)| fmt_num(u + e)));
                    row.extend(err.iter().map(|&e| fmt_num(e)));
                    row.push(String::new());
                }
                None => {
                    row.extend((0..2 * k).map(|_| fmt_num(f64::NAN)));
                    row.push(match &r.outcome {
                        Err(m) => m.clone(),
                        Ok(e) => format!("returned {} directions", e.k()),
                    });
                }
            }
            row
        });
        write_csv(&path, &header, rows)?;
        written.push(path);

        if self.records.iter().any(|r| r.spectrum.is_some()) {
            let path = dir.join(format!("{name}_spectrum.csv"));
            let header = [axis.clone(), "estimator".into(), "trial".into(), "u".into(), "value".into()];
            let rows = self.records.iter().flat_map(|r| {
                r.spectrum.iter().flatten().map(move |&(u, s)| vec![fmt_num(r.axis), r.estimator.name().into(), r.trial.to_string(), fmt_num(u), fmt_num(s)])
            });
            write_csv(&path, &header, rows)?;
            written.push(path);
        }

        if self.records.iter().any(|r| r.trace.is_some()) {
            let path = dir.join(format!("{name}_trace.csv"));
            let header = [axis.clone(), "estimator".into(), "trial".into(), "iter".into(), "cost".into()];
            let rows = self.records.iter().flat_map(|r| {
                r.trace.iter().flat_map(move |t| t.iter().enumerate().map(move |(i, &c)| vec![fmt_num(r.axis), r.estimator.name().into(), r.trial.to_string(), i.to_string(), fmt_num(c)]))
            });
            write_csv(&path, &header, rows)?;
            written.push(path);
        }

        if self.records.iter().any(|r| r.rounds.is_some()) {
            let path = dir.join(format!("{name}_rounds.csv"));
            let header = [axis.clone(), "estimator".into(), "trial".into(), "round".into(), "grid_size".into(), "rmse".into(), "cost".into()];
            let rows = self.records.iter().flat_map(|r| {
                r.rounds.iter().flatten().map(move |info| {
                    let rmse = errors(&info.estimate, truth)
                        .map(|e| (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt())
                        .unwrap_or(f64::NAN);
                    vec![
                        fmt_num(r.axis),
                        r.estimator.name().into(),
                        r.trial.to_string(),
                        info.round.to_string(),
                        info.grid_size.to_string(),
                        fmt_num(rmse),
                        fmt_num(info.cost),
                    ]
                })
            });
            write_csv(&path, &header, rows)?;
            written.push(path);
        }

        let path = dir.join(format!("{name}.meta"));
        let mut meta = String::new();
        let _ = writeln!(meta, "name = {name}");
        let _ = writeln!(meta, "kind = {:?}", self.config.experiment.kind);
        let _ = writeln!(meta, "seed = {}", self.config.experiment.seed);
        let _ = writeln!(meta, "trials = {}", self.config.experiment.trials);
        let _ = writeln!(meta, "jobs = {}", self.jobs);
        let _ = writeln!(meta, "wallclock_ms = {:.3}", self.wallclock_ms);
        for &est in &self.config.estimators.list {
            for x in self.config.points() {
                let ms: f64 = self.records.iter().filter(|r| r.estimator == est && r.axis == x).map(|r| r.elapsed_ms).sum();
                let _ = writeln!(meta, "wallclock_ms.{}.{} = {ms:.3}", est.name(), fmt_num(x));
            }
        }
        std::fs::write(&path, meta).map_err(|e| io_err(&path, e))?;
        written.push(path);

        if svg || self.config.output.svg {
            let path = dir.join(format!("{name}.svg"));
            std::fs::write(&path, self.rmse_svg()).map_err(|e| io_err(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// RMSE (log scale) against the sweep axis, one polyline per estimator plus the CRB.
    pub fn rmse_svg(&self) -> String {
        let (w, h, m) = (640.0, 420.0, 60.0);
        let xs = self.config.points();
        let mut series: Vec<(String, Vec<(f64, f64)>, bool)> = self
            .config
            .estimators
            .list
            .iter()
            .map(|&e| (e.name().to_string(), self.summary_for(e).iter().map(|r| (r.axis, r.rmse)).collect(), false))
            .collect();
        let crb: Vec<(f64, f64)> = self.summary_for(self.config.estimators.list[0]).iter().map(|r| (r.axis, r.crb)).collect();
        series.push(("crb".into(), crb, true));
        let ys: Vec<f64> = series.iter().flat_map(|s| s.1.iter().map(|p| p.1)).filter(|y| y.is_finite() && *y > 0.0).collect();
        let (ylo, yhi) = if ys.is_empty() {
            (-6.0, 0.0)
        } else {
            let lo = ys.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
            let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
            (lo, if hi > lo { hi } else { lo + 1.0 })
        };
        let (xlo, xhi) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let span = if xhi > xlo { xhi - xlo } else { 1.0 };
        let px = |x: f64| m + (w - 2.0 * m) * if xhi > xlo { (x - xlo) / span } else { 0.5 };
        let py = |y: f64| h - m - (h - 2.0 * m) * (y.log10() - ylo) / (yhi - ylo);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#000000"];
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * m, h - 2.0 * m);
        for d in (ylo as i64)..=(yhi as i64) {
            let y = py(10f64.powi(d as i32));
            let _ = writeln!(s, r##"<line x1="{m}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">1e{d}</text>"##, w - m, m - 6.0, y + 4.0);
        }
        for &x in &xs {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), h - m + 18.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, self.config.sweep.axis.name());
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle">{} RMSE</text>"#, w / 2.0, self.config.experiment.name);
        for (i, (label, pts, dashed)) in series.iter().enumerate() {
            let c = colors[i % colors.len()];
            let fin: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1.is_finite() && p.1 > 0.0).collect();
            let path: Vec<String> = fin.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}"{dash}/>"#, path.join(" "));
            for &(x, y) in &fin {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
            }
            let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{label}</text>"#, w - m + 6.0, m + 14.0 * (i as f64 + 1.0));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// One trial of every estimator at the first sweep value.
pub fn estimate_once(cfg: &ExperimentConfig, trial: usize) -> Result<Vec<TrialRecord>> {
    let g = cfg.geometry()?;
    let p = cfg.setup(cfg.points()[0])?;
    Ok(trial_records(cfg, &g, &p, &extras(cfg), trial))
}

/// Snapshots of one trial at the first sweep value.
pub fn simulate_once(cfg: &ExperimentConfig, trial: usize) -> Result<SnapshotMatrix> {
    let g = cfg.geometry()?;
    let p = cfg.setup(cfg.points()[0])?;
    simulate_trial(&p.scene, &g, p.snapshots, cfg.experiment.seed, trial as u64)
}

/// Per-source stochastic CRB (variance in `u`) at every sweep value.
pub fn crb_curve(cfg: &ExperimentConfig) -> Result<Vec<(f64, Result<Vec<f64>>)>> {
    let g = cfg.geometry()?;
    cfg.points()
        .into_iter()
        .map(|x| {
            let p = cfg.setup(x)?;
            Ok((x, crb_stochastic(&p.scene, &g, p.snapshots)))
        })
        .collect()
}
