//! Grid-based sparse Bayesian learning with EM hyperparameter updates.

use crate::error::{invalid, Result};
use crate::geometry::ArrayGeometry;
use crate::numerics::{CMatrix, Cholesky};
use crate::sigmodel::{manifold_matrix, reduce_snapshots, scm, SnapshotMatrix};

/// Grid hyperparameters and dictionary.
#[derive(Clone, Debug)]
pub struct SblState {
    pub grid: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: f64,
    pub dict: CMatrix,
}

impl SblState {
    /// All-ones initialization.
    pub fn new(g: &ArrayGeometry, grid: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return invalid("SBL noise level must be positive");
        }
        if grid.is_empty() {
            return invalid("SBL grid is empty");
        }
        let dict = manifold_matrix(&grid, g);
        let gamma = vec![1.0; grid.len()];
        Ok(Self {
            grid,
            gamma,
            lambda,
            dict,
        })
    }

    pub fn with_gamma(mut self, gamma: Vec<f64>) -> Self {
        assert_eq!(gamma.len(), self.grid.len());
        self.gamma = gamma;
        self
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `Phi Gamma Phi^H + lambda I`.
    pub fn model_covariance(&self) -> CMatrix {
        model_covariance(&self.dict, &self.gamma, self.lambda, None)
    }
}

/// `sum_i gamma_i phi_i phi_i^H + lambda I`, optionally leaving out one column.
pub(crate) fn model_covariance(dict: &CMatrix, gamma: &[f64], lambda: f64, skip: Option<usize>) -> CMatrix {
    let m = dict.rows();
    let mut c = CMatrix::zeros(m, m);
    for (i, &gi) in gamma.iter().enumerate() {
        if Some(i) == skip || gi == 0.0 {
            continue;
        }
        let phi = dict.col(i);
        for b in 0..m {
            let pb = phi[b].conj() * gi;
            for a in 0..m {
                c[(a, b)] += phi[a] * pb;
            }
        }
    }
    c.add_diag(lambda)
}

/// Negative log-likelihood `log det C + tr(C^{-1} R)` of a covariance model.
pub(crate) fn gaussian_cost(c: &CMatrix, r: &CMatrix) -> Result<f64> {
    let ch = Cholesky::new(c)?;
    Ok(ch.log_det() + ch.solve(r).trace().re)
}

pub fn sbl_cost(s: &SblState, r: &CMatrix) -> Result<f64> {
    if !(s.lambda > 0.0) {
        return invalid("SBL noise level must be positive");
    }
    gaussian_cost(&s.model_covariance(), r)
}

/// Posterior moments of the grid amplitudes.
#[derive(Clone, Debug)]
pub struct PosteriorStats {
    /// `G x L` posterior means.
    pub mean: CMatrix,
    /// Posterior variances (diagonal of the posterior covariance).
    pub var: Vec<f64>,
}

/// One EM iteration: posterior statistics and the updated `gamma`.
pub fn sbl_em_step(s: &SblState, y: &SnapshotMatrix) -> Result<(PosteriorStats, Vec<f64>)> {
    let ch = Cholesky::new(&s.model_covariance())?;
    let cinv_phi = ch.solve(&s.dict);
    let g = s.len();
    let cols = y.data.cols();
    let l = y.snapshots as f64;
    // Phi^H C^{-1} Y, scaled row-wise by gamma.
    let proj = cinv_phi.adjoint().matmul(&y.data);
    let mut mean = CMatrix::zeros(g, cols);
    let mut var = vec![0.0; g];
    let mut gamma = vec![0.0; g];
    for i in 0..g {
        let gi = s.gamma[i];
        if gi == 0.0 {
            continue;
        }
        let mut energy = 0.0;
        for j in 0..cols {
            let x = proj[(i, j)] * gi;
            mean[(i, j)] = x;
            energy += x.norm_sqr();
        }
        let quad: f64 = s
            .dict
            .col(i)
            .iter()
            .zip(cinv_phi.col(i))
            .map(|(a, b)| (a.conj() * b).re)
            .sum();
        var[i] = (gi - gi * gi * quad).max(0.0);
        gamma[i] = (energy / l + var[i]).max(0.0);
    }
    Ok((PosteriorStats { mean, var }, gamma))
}

#[derive(Clone, Debug)]
pub struct SblConfig {
    pub iters: usize,
    pub tol: f64,
}

impl Default for SblConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            tol: 1e-6,
        }
    }
}

/// Result of [`sbl_run_traced`].
#[derive(Clone, Debug)]
pub struct SblRun {
    pub state: SblState,
    pub iterations: usize,
    /// Cost before the first step and after every step.
    pub costs: Vec<f64>,
}

/// EM-SBL from the all-ones start until the relative `gamma` change drops below `tol`.
pub fn sbl_run(
    g: &ArrayGeometry,
    grid: &[f64],
    y: &SnapshotMatrix,
    lambda: f64,
    cfg: &SblConfig,
) -> Result<SblState> {
    Ok(run(SblState::new(g, grid.to_vec(), lambda)?, y, cfg, false)?.state)
}

pub fn sbl_run_traced(
    g: &ArrayGeometry,
    grid: &[f64],
    y: &SnapshotMatrix,
    lambda: f64,
    cfg: &SblConfig,
) -> Result<SblRun> {
    run(SblState::new(g, grid.to_vec(), lambda)?, y, cfg, true)
}

/// Continue EM from an existing state.
pub(crate) fn run(mut state: SblState, y: &SnapshotMatrix, cfg: &SblConfig, trace: bool) -> Result<SblRun> {
    if cfg.iters == 0 {
        return invalid("SBL needs at least one iteration");
    }
    let y = reduce_snapshots(y)?;
    let r = scm(&y);
    let mut costs = Vec::new();
    if trace {
        costs.push(sbl_cost(&state, &r)?);
    }
    let mut iterations = 0;
    for _ in 0..cfg.iters {
        let (_, next) = sbl_em_step(&state, &y)?;
        iterations += 1;
        let scale = next.iter().copied().fold(0.0, f64::max).max(1e-12);
        let change = next
            .iter()
            .zip(&state.gamma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state.gamma = next;
        if trace {
            costs.push(sbl_cost(&state, &r)?);
        }
        if change / scale < cfg.tol {
            break;
        }
    }
    Ok(SblRun {
        state,
        iterations,
        costs,
    })
}

/// `G` points uniformly covering `[-1, 1)`.
pub fn uniform_grid(g: usize) -> Vec<f64> {
    (0..g).map(|i| -1.0 + 2.0 * i as f64 / g as f64).collect()
}

/// Indices of the `k` largest local maxima of `gamma`, ranked by value
/// (ties to the lower index). Falls back to the largest remaining entries
/// when there are fewer than `k` local maxima.
pub fn top_peaks(gamma: &[f64], k: usize) -> Vec<usize> {
    let n = gamma.len();
    let is_peak = |i: usize| {
        let left = if i > 0 { gamma[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < n { gamma[i + 1] } else { f64::NEG_INFINITY };
        gamma[i] >= left && gamma[i] > right || (gamma[i] > left && gamma[i] >= right)
    };
    let rank = |idx: &mut Vec<usize>| {
        idx.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    };
    let mut peaks: Vec<usize> = (0..n).filter(|&i| is_peak(i)).collect();
    rank(&mut peaks);
    peaks.truncate(k);
    if peaks.len() < k {
        let mut rest: Vec<usize> = (0..n).filter(|i| !peaks.contains(i)).collect();
        rank(&mut rest);
        peaks.extend(rest.into_iter().take(k - peaks.len()));
    }
    peaks
}

/// Grid locations of the `k` top peaks, ascending.
pub fn peak_locations(state: &SblState, k: usize) -> Vec<f64> {
    let mut u: Vec<f64> = top_peaks(&state.gamma, k).into_iter().map(|i| state.grid[i]).collect();
    u.sort_by(f64::total_cmp);
    u
}
