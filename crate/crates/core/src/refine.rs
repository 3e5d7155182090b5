//! Likelihood-driven grid adjustment and multi-resolution refinement for SBL,
//! usable with arbitrary (off-grid) sensor positions.

use crate::error::{invalid, Result};
use crate::estimate::DoaEstimate;
use crate::geometry::ArrayGeometry;
use crate::numerics::{dot_h, CMatrix, Cholesky};
use crate::sbl::{self, model_covariance, top_peaks, uniform_grid, SblConfig, SblState};
use crate::sigmodel::{manifold, scm, SnapshotMatrix};

/// `(q, s)` for a candidate atom at `u` given the model without grid point `skip`.
pub fn qs_values(u: f64, state: &SblState, skip: usize, r: &CMatrix, g: &ArrayGeometry) -> Result<(f64, f64)> {
    let ch = Cholesky::new(&model_covariance(&state.dict, &state.gamma, state.lambda, Some(skip)))?;
    Ok(qs_with(&ch, r, &manifold(u, g)))
}

fn qs_with(ch: &Cholesky, r: &CMatrix, phi: &[crate::numerics::C64]) -> (f64, f64) {
    let x = ch.solve_vec(phi);
    let s = dot_h(phi, &x).re;
    let q = dot_h(&x, &r.matvec(&x)).re;
    (q.max(0.0), s)
}

/// Closed-form optimal variance for one atom and the resulting cost change.
pub fn gamma_opt(q: f64, s: f64) -> (f64, f64) {
    if q > s {
        let x = q / s;
        ((q - s) / (s * s), x.ln() - x + 1.0)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct AdjustConfig {
    /// Candidate points per neighbourhood search (odd, so the incumbent is included).
    pub g_fine: usize,
    pub max_sweeps: usize,
    pub move_tol: f64,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        Self {
            g_fine: 101,
            max_sweeps: 30,
            move_tol: 1e-9,
        }
    }
}

/// Half-width of the search window around grid point `i`.
fn window(grid: &[f64], i: usize) -> f64 {
    let left = if i > 0 { grid[i] - grid[i - 1] } else { f64::INFINITY };
    let right = if i + 1 < grid.len() { grid[i + 1] - grid[i] } else { f64::INFINITY };
    let gap = left.min(right);
    if gap.is_finite() {
        0.49 * gap
    } else {
        0.49
    }
}

/// Move each of the `k` top peaks to the best nearby location and variance,
/// sweeping until nothing moves. Returns the number of sweeps used.
pub fn peak_adjust(state: &mut SblState, r: &CMatrix, g: &ArrayGeometry, k: usize, cfg: &AdjustConfig) -> Result<usize> {
    if k == 0 {
        return invalid("peak adjustment needs at least one peak");
    }
    if cfg.g_fine < 3 || cfg.g_fine % 2 == 0 {
        return invalid("g_fine must be odd and at least 3");
    }
    let half = (cfg.g_fine - 1) / 2;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut moved = false;
        for i in top_peaks(&state.gamma, k) {
            let ch = Cholesky::new(&model_covariance(&state.dict, &state.gamma, state.lambda, Some(i)))?;
            let (u0, delta) = (state.grid[i], window(&state.grid, i));
            // Incumbent first so that ties keep the point where it is.
            let mut best: Option<(f64, f64, f64)> = None;
            for t in std::iter::once(half).chain((0..cfg.g_fine).filter(|&t| t != half)) {
                let u = u0 + delta * (t as f64 - half as f64) / half as f64;
                if !(-1.0..1.0).contains(&u) {
                    continue;
                }
                let (q, s) = qs_with(&ch, r, &manifold(u, g));
                let (gam, l) = gamma_opt(q, s);
                if q > s && best.is_none_or(|b| l < b.1) {
                    best = Some((gam, l, u));
                }
            }
            let Some((gam, _, u)) = best else { continue };
            if (u - u0).abs() > cfg.move_tol {
                moved = true;
            }
            state.gamma[i] = gam;
            state.grid[i] = u;
            let phi = manifold(u, g);
            state.dict.col_mut(i).copy_from_slice(&phi);
        }
        if !moved {
            break;
        }
    }
    Ok(sweeps)
}

#[derive(Clone, Debug)]
pub struct RefineConfig {
    pub g0: usize,
    pub g_factor: usize,
    pub gamma_thresh: f64,
    /// Total rounds including the initial uniform-grid pass.
    pub rounds: usize,
    pub lambda: f64,
    pub warm_start: bool,
    pub sbl: SblConfig,
    pub adjust: AdjustConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            g0: 150,
            g_factor: 3,
            gamma_thresh: 1e-3,
            rounds: 5,
            lambda: 1.0,
            warm_start: false,
            sbl: SblConfig::default(),
            adjust: AdjustConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g0 < 2 {
            return invalid("g0 must be at least 2");
        }
        if self.g_factor < 2 {
            return invalid("g_factor must be at least 2");
        }
        if !(self.lambda > 0.0) || !(self.gamma_thresh >= 0.0) {
            return invalid("lambda must be positive and gamma_thresh nonnegative");
        }
        Ok(())
    }
}

/// Diagnostics for one refinement round.
#[derive(Clone, Debug)]
pub struct RoundInfo {
    pub round: usize,
    /// Grid size after insertion, before the next pruning.
    pub grid_size: usize,
    pub cost: f64,
    pub estimate: DoaEstimate,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub estimate: DoaEstimate,
    pub rounds: Vec<RoundInfo>,
    pub state: SblState,
}

/// Grid after pruning and inserting fine windows around `peaks`.
fn refined_grid(state: &SblState, peaks: &[f64], g0: usize, half_width: f64, step: f64, per_side: usize, thresh: f64) -> Vec<f64> {
    let inside = |u: f64| peaks.iter().any(|&p| (u - p).abs() <= half_width + 1e-12);
    let mut kept: Vec<(f64, f64)> = state
        .grid
        .iter()
        .zip(&state.gamma)
        .filter(|&(&u, &gam)| gam >= thresh && !inside(u))
        .map(|(&u, &gam)| (u, gam))
        .collect();
    if kept.len() > g0 {
        kept.sort_by(|a, b| b.1.total_cmp(&a.1));
        kept.truncate(g0);
    }
    let mut grid: Vec<f64> = kept.into_iter().map(|(u, _)| u).collect();
    for &p in peaks {
        for j in 0..=2 * per_side {
            let u = p + (j as f64 - per_side as f64) * step;
            if (-1.0..1.0).contains(&u) {
                grid.push(u);
            }
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    grid
}

/// Multi-resolution SBL: uniform grid, then repeated prune / insert / re-fit / adjust.
pub fn multires_refine(y: &SnapshotMatrix, g: &ArrayGeometry, k: usize, cfg: &RefineConfig) -> Result<RefineResult> {
    cfg.validate()?;
    if k == 0 {
        return invalid("source count must be at least 1");
    }
    if y.sensors() != g.len() {
        return invalid("snapshot rows do not match sensor count");
    }
    let r = scm(y);
    let y = crate::sigmodel::reduce_snapshots(y)?;
    let mut state = sbl::run(SblState::new(g, uniform_grid(cfg.g0), cfg.lambda)?, &y, &cfg.sbl, false)?.state;
    peak_adjust(&mut state, &r, g, k, &cfg.adjust)?;
    let mut rounds = vec![RoundInfo {
        round: 0,
        grid_size: state.len(),
        cost: sbl::sbl_cost(&state, &r)?,
        estimate: sbl_estimate(&state, k),
    }];
    let gf = cfg.g_factor as f64;
    for round in 1..cfg.rounds.max(1) {
        let g_eff = cfg.g0 as f64 * gf.powi(round as i32 - 1);
        let peaks = sbl_estimate(&state, k).u;
        let grid = refined_grid(
            &state,
            &peaks,
            cfg.g0,
            4.0 / g_eff,
            2.0 / g_eff / gf,
            2 * cfg.g_factor,
            cfg.gamma_thresh,
        );
        let mut next = SblState::new(g, grid, cfg.lambda)?;
        if cfg.warm_start {
            for (u, gam) in next.grid.iter().zip(next.gamma.iter_mut()) {
                if let Some(j) = state.grid.iter().position(|v| (v - u).abs() <= 1e-12) {
                    *gam = state.gamma[j].max(cfg.gamma_thresh);
                }
            }
        }
        let size = next.len();
        state = sbl::run(next, &y, &cfg.sbl, false)?.state;
        peak_adjust(&mut state, &r, g, k, &cfg.adjust)?;
        rounds.push(RoundInfo {
            round,
            grid_size: size,
            cost: sbl::sbl_cost(&state, &r)?,
            estimate: sbl_estimate(&state, k),
        });
    }
    Ok(RefineResult {
        estimate: rounds.last().unwrap().estimate.clone(),
        rounds,
        state,
    })
}

/// Top-`k` peak locations with their variances.
pub fn sbl_estimate(state: &SblState, k: usize) -> DoaEstimate {
    let mut pairs: Vec<(f64, f64)> = top_peaks(&state.gamma, k)
        .into_iter()
        .map(|i| (state.grid[i], state.gamma[i]))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    DoaEstimate {
        u: pairs.iter().map(|p| p.0).collect(),
        powers: Some(pairs.iter().map(|p| p.1).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::*;
    use crate::sbl::{sbl_cost, sbl_run};
    use crate::sigmodel::{simulate_trial, SourceScene};
    use rand::Rng;

    fn arbitrary() -> ArrayGeometry {
        ArrayGeometry::new(vec![0.0, 1.0, 2.1, 3.5, 4.7, 10.0]).unwrap()
    }

    #[test]
    fn qs_examples() {
        let g = ArrayGeometry::ula(5);
        let s = SblState::new(&g, uniform_grid(8), 1.0).unwrap().with_gamma(vec![0.0; 8]);
        let (q, sv) = qs_values(0.37, &s, 2, &CMatrix::identity(5), &g).unwrap();
        assert!((q - 5.0).abs() < 1e-12 && (sv - 5.0).abs() < 1e-12);
        let (q, _) = qs_values(0.37, &s, 2, &CMatrix::identity(5).scale(2.5), &g).unwrap();
        assert!((q - 12.5).abs() < 1e-12);
    }

    #[test]
    fn qs_match_dense_formula() {
        let mut rg = rng(31);
        let g = arbitrary();
        let gamma: Vec<f64> = (0..12).map(|_| rg.gen_range(0.0..2.0)).collect();
        let s = SblState::new(&g, uniform_grid(12), 0.6).unwrap().with_gamma(gamma.clone());
        let r = random_pd(&mut rg, 6);
        let (q, sv) = qs_values(0.123, &s, 4, &r, &g).unwrap();
        let mut gm = gamma;
        gm[4] = 0.0;
        let c = s.clone().with_gamma(gm).model_covariance();
        let ci = crate::numerics::hpd_inverse(&c).unwrap();
        let phi = manifold(0.123, &g);
        let s_ref = dot_h(&phi, &ci.matvec(&phi)).re;
        let q_ref = dot_h(&phi, &ci.matmul(&r).matmul(&ci).matvec(&phi)).re;
        assert!((s_ref - sv).abs() < 1e-12 * s_ref && (q_ref - q).abs() < 1e-12 * q_ref);
    }

    #[test]
    fn gamma_opt_examples_and_sign() {
        assert_eq!(gamma_opt(1.0, 1.0), (0.0, 0.0));
        assert_eq!(gamma_opt(0.5, 1.0), (0.0, 0.0));
        let (gm, l) = gamma_opt(2.0, 1.0);
        assert!((gm - 1.0).abs() < 1e-15 && (l - (2f64.ln() - 1.0)).abs() < 1e-15);
        let mut rg = rng(0);
        for _ in 0..100_000 {
            let (q, s) = (rg.gen_range(0.0..10.0), rg.gen_range(1e-6..10.0));
            assert!(gamma_opt(q, s).1 <= 0.0);
        }
    }

    #[test]
    fn optimal_atom_matches_cost_change() {
        let mut rg = rng(8);
        let g = arbitrary();
        let gamma: Vec<f64> = (0..10).map(|_| rg.gen_range(0.0..1.0)).collect();
        let s = SblState::new(&g, uniform_grid(10), 0.5).unwrap().with_gamma(gamma);
        let r = random_pd(&mut rg, 6).scale(3.0);
        let (q, sv) = qs_values(s.grid[3], &s, 3, &r, &g).unwrap();
        let (gm, l) = gamma_opt(q, sv);
        let mut without = s.gamma.clone();
        without[3] = 0.0;
        let mut with = s.gamma.clone();
        with[3] = gm;
        let c0 = sbl_cost(&s.clone().with_gamma(without), &r).unwrap();
        let c1 = sbl_cost(&s.clone().with_gamma(with), &r).unwrap();
        assert!((c1 - c0 - l).abs() < 1e-10);
    }

    #[test]
    fn adjust_never_increases_cost_and_tracks_offgrid_source() {
        let g = arbitrary();
        let scene = SourceScene::from_snr(vec![0.2137], &[20.0]).unwrap();
        let y = simulate_trial(&scene, &g, 500, 4, 0).unwrap();
        let r = scm(&y);
        let mut s = sbl_run(&g, &uniform_grid(40), &y, 1.0, &SblConfig::default()).unwrap();
        let before = sbl_cost(&s, &r).unwrap();
        peak_adjust(&mut s, &r, &g, 1, &AdjustConfig::default()).unwrap();
        let after = sbl_cost(&s, &r).unwrap();
        assert!(after < before);
        let u = sbl_estimate(&s, 1).u[0];
        assert!((u - 0.2137).abs() < 0.005, "{u}");
    }

    #[test]
    fn adjust_keeps_exact_peak() {
        let g = ArrayGeometry::ula(6);
        let grid = uniform_grid(20);
        let mut scene = SourceScene::from_snr(vec![grid[13]], &[0.0]).unwrap();
        scene.noise_var = 1e-10;
        let phi = manifold(grid[13], &g);
        let r = CMatrix::outer(&phi).add_diag(1e-6);
        let _ = scene;
        let mut gamma = vec![0.0; 20];
        gamma[13] = 0.5;
        let mut s = SblState::new(&g, grid.clone(), 1e-6).unwrap().with_gamma(gamma);
        peak_adjust(&mut s, &r, &g, 1, &AdjustConfig::default()).unwrap();
        assert_eq!(s.grid[13], grid[13]);
        assert!((s.gamma[13] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn refinement_rounds_and_grid_bounds() {
        let g = arbitrary();
        let scene = SourceScene::from_snr(vec![-0.54, 0.4802], &[20.0, 20.0]).unwrap();
        let y = simulate_trial(&scene, &g, 500, 11, 0).unwrap();
        let cfg = RefineConfig::default();
        let res = multires_refine(&y, &g, 2, &cfg).unwrap();
        assert_eq!(res.rounds.len(), 5);
        for info in &res.rounds {
            assert!(info.grid_size <= 150 + 13 * 2);
        }
        for w in res.state.grid.windows(2) {
            assert!(w[1] > w[0]);
        }
        for (a, b) in res.estimate.u.iter().zip(&scene.u) {
            assert!((a - b).abs() < 0.01, "{:?}", res.estimate.u);
        }
        let single = multires_refine(&y, &g, 2, &RefineConfig { rounds: 1, ..cfg }).unwrap();
        assert_eq!(single.rounds.len(), 1);
    }
}
