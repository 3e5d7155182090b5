//! DoA extraction from (structured) covariance matrices.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::geometry::{coarray, toeplitz_embed, ArrayGeometry, LagVector};
use crate::mlesolve::{structcov_mle, MleConfig};
use crate::numerics::{herm_eig, poly_roots, real_spd_solve, CMatrix, EigenPair, C64, ZERO};
use crate::sigmodel::{manifold, spatial_smooth};

/// Estimated directions (ascending) with optional powers.
#[derive(Clone, Debug, PartialEq)]
pub struct DoaEstimate {
    pub u: Vec<f64>,
    pub powers: Option<Vec<f64>>,
}

impl DoaEstimate {
    pub fn new(mut u: Vec<f64>) -> Self {
        u.sort_by(f64::total_cmp);
        Self { u, powers: None }
    }

    pub fn k(&self) -> usize {
        self.u.len()
    }
}

/// Wrap into `[-1, 1)`.
pub fn wrap_u(u: f64) -> f64 {
    let w = (u + 1.0).rem_euclid(2.0) - 1.0;
    if w >= 1.0 {
        -1.0
    } else {
        w
    }
}

fn noise_projector(e: &EigenPair, k: usize) -> CMatrix {
    let n = e.values.len();
    let mut c = CMatrix::zeros(n, n);
    for col in 0..n - k {
        let v = e.vectors.col(col);
        for b in 0..n {
            let vb = v[b].conj();
            for a in 0..n {
                c[(a, b)] += v[a] * vb;
            }
        }
    }
    c
}

fn check_order(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return invalid("source count must be at least 1");
    }
    if k >= n {
        return invalid(format!("{k} sources need a covariance of order > {k}, have {n}"));
    }
    Ok(())
}

/// Root-MUSIC for a uniform linear (Toeplitz-compatible) covariance of order `n`.
pub fn root_music(r: &CMatrix, k: usize) -> Result<DoaEstimate> {
    let pos: Vec<usize> = (0..r.rows()).collect();
    root_music_on(r, &pos, k)
}

/// Root-MUSIC for a covariance of sensors at the given integer positions.
pub fn root_music_on(r: &CMatrix, pos: &[usize], k: usize) -> Result<DoaEstimate> {
    let n = r.rows();
    check_order(n, k)?;
    if pos.len() != n {
        return invalid("position count does not match covariance order");
    }
    let e = herm_eig(&r.symmetrize())?;
    let c = noise_projector(&e, k);

    // phi^H C phi = sum_k c_k w^k with w = exp(-j pi u), k = p_b - p_a.
    let span = *pos.iter().max().unwrap();
    let mut coeffs = vec![ZERO; 2 * span + 1];
    for (a, &pa) in pos.iter().enumerate() {
        for (b, &pb) in pos.iter().enumerate() {
            coeffs[pb + span - pa] += c[(a, b)];
        }
    }
    let scale = coeffs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    while coeffs.len() > 1 && coeffs.last().unwrap().norm() <= 1e-13 * scale {
        coeffs.pop();
    }
    let lead_zeros = coeffs.iter().take_while(|z| z.norm() <= 1e-13 * scale).count();
    let trimmed = &coeffs[lead_zeros..];
    let roots = poly_roots(trimmed)?;
    Ok(DoaEstimate::new(select_roots(&roots, trimmed, span - lead_zeros, k)))
}

/// Pick `k` directions from roots that come in conjugate-reciprocal pairs.
///
/// Roots are paired greedily with the partner nearest their mirror image `1/conj(z)`;
/// pairs are ranked by how close the inner root is to the unit circle.
fn select_roots(roots: &[C64], coeffs: &[C64], offset: usize, k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..roots.len()).collect();
    order.sort_by(|&a, &b| roots[a].norm().total_cmp(&roots[b].norm()));
    let mut used = vec![false; roots.len()];
    let mut cands: Vec<(f64, f64)> = Vec::with_capacity(roots.len() / 2 + 1);
    for &i in &order {
        if used[i] {
            continue;
        }
        used[i] = true;
        let z = roots[i];
        if z.norm() == 0.0 {
            continue;
        }
        let mirror = 1.0 / z.conj();
        let partner = (0..roots.len())
            .filter(|&j| !used[j])
            .min_by(|&a, &b| (roots[a] - mirror).norm().total_cmp(&(roots[b] - mirror).norm()));
        let (arg, dist) = match partner {
            Some(j) if (roots[j] - mirror).norm() < 1e-3 * mirror.norm().max(1.0) => {
                used[j] = true;
                // A double root on the circle splits symmetrically; average the phases.
                let arg = z.arg() + 0.5 * (roots[j] / z).arg();
                (arg, 1.0 - z.norm().min(roots[j].norm()))
            }
            _ => (z.arg(), (1.0 - z.norm()).abs()),
        };
        let mut u = -arg / PI;
        if dist < 1e-6 {
            u = polish_on_circle(coeffs, offset, u);
        }
        cands.push((dist.abs(), wrap_u(u)));
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    cands.into_iter().take(k).map(|c| c.1).collect()
}

/// Newton steps on the derivative of `f(u) = sum_k c_k exp(-j pi u)^(k - offset)`.
/// Used for roots sitting on the unit circle, where root finding loses half the digits.
fn polish_on_circle(coeffs: &[C64], offset: usize, u0: f64) -> f64 {
    let slope = |u: f64| {
        let (mut d1, mut d2) = (0.0, 0.0);
        for (idx, c) in coeffs.iter().enumerate() {
            let k = idx as f64 - offset as f64;
            let t = *c * C64::from_polar(1.0, -PI * k * u);
            d1 += PI * k * t.im;
            d2 -= (PI * k).powi(2) * t.re;
        }
        (d1, d2)
    };
    let mut u = u0;
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let (d1, d2) = slope(u);
        if !(d2 > 0.0) {
            break;
        }
        let step = d1 / d2;
        if !(step.abs() < last) || (u - step - u0).abs() > 1e-4 {
            break;
        }
        u -= step;
        last = step.abs();
        if last < 1e-16 {
            break;
        }
    }
    u
}

/// MUSIC pseudospectrum `1 / phi^H E_n E_n^H phi`, normalized to a maximum of 1.
pub fn music_spectrum(r: &CMatrix, k: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let g = ArrayGeometry::ula(r.rows());
    music_spectrum_on(r, &g, k, grid)
}

pub fn music_spectrum_on(r: &CMatrix, g: &ArrayGeometry, k: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let n = r.rows();
    check_order(n, k)?;
    if g.len() != n {
        return invalid("geometry does not match covariance order");
    }
    let e = herm_eig(&r.symmetrize())?;
    let c = noise_projector(&e, k);
    let scale = c.max_abs().max(1e-300);
    let mut out: Vec<f64> = grid
        .iter()
        .map(|&u| {
            let phi = manifold(u, g);
            let den = crate::numerics::dot_h(&phi, &c.matvec(&phi)).re;
            1.0 / den.max(1e-15 * scale)
        })
        .collect();
    let top = out.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        out.iter_mut().for_each(|x| *x /= top);
    }
    Ok(out)
}

/// Directions of the `k` strongest MUSIC spectrum peaks on a grid.
pub fn music_peaks(r: &CMatrix, g: &ArrayGeometry, k: usize, grid: &[f64]) -> Result<DoaEstimate> {
    let spec = music_spectrum_on(r, g, k, grid)?;
    let idx = crate::sbl::top_peaks(&spec, k);
    Ok(DoaEstimate::new(idx.into_iter().map(|i| grid[i]).collect()))
}

/// Carathéodory–Fejér decomposition of a PSD Toeplitz matrix.
///
/// With `subtract_min` the smallest eigenvalue is removed first, which turns a
/// full-rank `T + sigma^2 I` into a decomposable low-rank matrix.
pub fn vandermonde_decompose(t: &CMatrix, rank_tol: f64, subtract_min: bool) -> Result<DoaEstimate> {
    let n = t.rows();
    let mut t = t.symmetrize();
    let mut e = herm_eig(&t)?;
    if subtract_min {
        let lo = e.min();
        t = t.add_diag(-lo);
        e.values.iter_mut().for_each(|x| *x -= lo);
    }
    let top = e.max();
    if !(top > 0.0) {
        return invalid("matrix has no positive part to decompose");
    }
    let d = e.values.iter().filter(|&&x| x > rank_tol * top).count();
    if d >= n {
        return invalid("matrix is numerically full rank; subtract the noise floor first");
    }
    let mut est = root_music(&t, d)?;
    let g = ArrayGeometry::ula(n);
    let phis: Vec<Vec<C64>> = est.u.iter().map(|&u| manifold(u, &g)).collect();
    let mut support: Vec<usize> = (0..d).collect();
    let mut p = vec![0.0; d];
    // Least squares in Frobenius norm, re-solved on the positive support.
    loop {
        let s = support.len();
        let mut gram = vec![0.0; s * s];
        let mut rhs = vec![0.0; s];
        for (a, &i) in support.iter().enumerate() {
            rhs[a] = crate::numerics::dot_h(&phis[i], &t.matvec(&phis[i])).re;
            for (b, &j) in support.iter().enumerate() {
                gram[a * s + b] = crate::numerics::dot_h(&phis[i], &phis[j]).norm_sqr();
            }
        }
        if s > 0 && !real_spd_solve(&gram, s, &mut rhs) {
            return invalid("Vandermonde basis is singular");
        }
        p.iter_mut().for_each(|x| *x = 0.0);
        for (a, &i) in support.iter().enumerate() {
            p[i] = rhs[a];
        }
        let before = support.len();
        support.retain(|&i| p[i] > 0.0);
        if support.len() == before {
            break;
        }
    }
    est.powers = Some(p.iter().map(|x| x.max(0.0)).collect());
    Ok(est)
}

/// Rebuild `sum_i p_i phi_i phi_i^H` on an order-`n` ULA.
pub fn vandermonde_reconstruct(est: &DoaEstimate, n: usize) -> CMatrix {
    let g = ArrayGeometry::ula(n);
    let mut out = CMatrix::zeros(n, n);
    let ones = vec![1.0; est.k()];
    let powers = est.powers.as_deref().unwrap_or(&ones);
    for (&u, &p) in est.u.iter().zip(powers) {
        out = &out + &CMatrix::outer(&manifold(u, &g)).scale(p);
    }
    out
}

fn contiguous_lags(g: &ArrayGeometry, k: usize) -> Result<usize> {
    let mc = coarray(g)?.contiguous;
    if k >= mc {
        return invalid(format!("{k} sources need more than {k} contiguous lags, have {mc}"));
    }
    Ok(mc)
}

/// Toeplitz matrix of the contiguous lags of `v`.
pub fn method1_matrix(v: &LagVector, g: &ArrayGeometry) -> Result<CMatrix> {
    Ok(toeplitz_embed(&v.truncate(coarray(g)?.contiguous)))
}

/// Root-MUSIC on the Toeplitz matrix of the contiguous lags of `v`.
pub fn method1(v: &LagVector, g: &ArrayGeometry, k: usize) -> Result<DoaEstimate> {
    contiguous_lags(g, k)?;
    root_music(&method1_matrix(v, g)?, k)
}

/// Toeplitz matrix fitted by structured ML to the spatially smoothed covariance.
///
/// `cfg.lambda` is the sensor noise variance; the smoothed matrix has noise
/// level `lambda^2 / M_c`.
pub fn method2_matrix(r: &CMatrix, g: &ArrayGeometry, cfg: &MleConfig) -> Result<CMatrix> {
    let mc = coarray(g)?.contiguous;
    let rz = spatial_smooth(r, g)?;
    let mut zcfg = cfg.clone();
    zcfg.lambda = cfg.lambda * cfg.lambda / mc as f64;
    zcfg.lambda_m = 1e3 * zcfg.lambda;
    Ok(toeplitz_embed(&structcov_mle(&rz, &ArrayGeometry::ula(mc), &zcfg)?))
}

/// Method II: [`method2_matrix`] followed by root-MUSIC.
pub fn method2(r: &CMatrix, g: &ArrayGeometry, k: usize, cfg: &MleConfig) -> Result<DoaEstimate> {
    contiguous_lags(g, k)?;
    root_music(&method2_matrix(r, g, cfg)?, k)
}
