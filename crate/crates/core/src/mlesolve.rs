//! Majorization-minimization solver for the structured covariance ML problem
//! and its EM variant for missing correlation lags.

use crate::error::{invalid, Error, Result};
use crate::geometry::{adjoint_on, nested_completion, structured_on, toeplitz_embed, ArrayGeometry, LagVector};
use crate::numerics::{real_spd_solve, CMatrix, Cholesky, C64};
use crate::sigmodel::{scm, SnapshotMatrix};

/// Log-barrier continuation schedule for the inner problem.
#[derive(Clone, Debug)]
pub struct BarrierConfig {
    pub mu_start: f64,
    pub mu_end: f64,
    pub mu_factor: f64,
    pub newton_iters: usize,
    /// Stop the final Newton stage when half the squared decrement falls below `tol * (1 + |obj|)`.
    pub tol: f64,
    /// Same, for the intermediate stages of the continuation.
    pub stage_tol: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            mu_start: 1e-2,
            mu_end: 1e-9,
            mu_factor: 0.1,
            newton_iters: 100,
            tol: 1e-15,
            stage_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MleConfig {
    /// Noise level on observed sensors.
    pub lambda: f64,
    /// Noise level on interpolated (missing) sensors.
    pub lambda_m: f64,
    pub outer_iters: usize,
    /// Subproblem solves per E-step in the EM variant.
    pub inner_iters: usize,
    pub barrier: BarrierConfig,
}

impl MleConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            lambda_m: 1e3 * lambda,
            outer_iters: 20,
            inner_iters: 1,
            barrier: BarrierConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.lambda_m > 0.0) {
            return invalid("noise levels must be positive");
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return invalid("iteration counts must be at least 1");
        }
        let b = &self.barrier;
        if !(b.mu_start > 0.0 && b.mu_end > 0.0 && b.mu_end <= b.mu_start && b.mu_factor > 0.0 && b.mu_factor < 1.0) {
            return invalid("bad barrier schedule");
        }
        if b.newton_iters == 0 {
            return invalid("newton_iters must be at least 1");
        }
        Ok(())
    }
}

/// Data of the convex inner problem
/// `min Re tr(W M(v)) + tr((M(v) + D)^{-1} R_fit)  s.t.  Toep(v) >= 0`,
/// where `M(v)` samples `Toep(v)` at `pos`.
#[derive(Clone, Debug)]
pub struct SubproblemWeights {
    pub w: CMatrix,
    pub d: Vec<f64>,
    pub r_fit: CMatrix,
    pub pos: Vec<usize>,
}

impl SubproblemWeights {
    fn check(&self, n: usize) -> Result<()> {
        let m = self.pos.len();
        for (name, a) in [("W", &self.w), ("R_fit", &self.r_fit)] {
            if a.rows() != m || a.cols() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: a.rows(),
                });
            }
            if !a.is_finite() {
                return Err(Error::NonFinite(if name == "W" { "weight matrix" } else { "fit matrix" }));
            }
        }
        if self.d.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: self.d.len(),
            });
        }
        if self.d.iter().any(|&x| !(x > 0.0)) {
            return invalid("noise diagonal must be positive");
        }
        if self.pos.iter().any(|&p| p >= n) {
            return invalid("position outside the lag range");
        }
        Ok(())
    }

    /// `Re tr(W M(v)) + tr((M(v) + D)^{-1} R_fit)`; `None` when `M(v) + D` is not PD.
    pub fn objective(&self, v: &LagVector) -> Option<f64> {
        let m = structured_on(v, &self.pos);
        let ch = Cholesky::new(&add_diag_vec(&m, &self.d)).ok()?;
        Some(self.w.trace_product(&m).re + ch.solve(&self.r_fit).trace().re)
    }
}

fn add_diag_vec(a: &CMatrix, d: &[f64]) -> CMatrix {
    let mut s = a.clone();
    for (i, &x) in d.iter().enumerate() {
        s[(i, i)] += x;
    }
    s
}

/// Upper-triangular index pairs `(i, j)` of `M(v)` grouped by lag `pos[j] - pos[i]`.
fn lag_pairs(pos: &[usize], n: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); n];
    for i in 0..pos.len() {
        for j in i..pos.len() {
            out[pos[j] - pos[i]].push((i, j));
        }
    }
    out
}

/// Adds `scale * Re tr(B_a P B_b Q)` to `hess` for all real coordinates `a, b`,
/// where `B_a` is the derivative of `M(v)` along coordinate `a`.
fn add_hessian(hess: &mut [f64], pairs: &[Vec<(usize, usize)>], p: &CMatrix, q: &CMatrix, scale: f64) {
    let dim = 2 * pairs.len() - 1;
    let im = C64::new(0.0, 1.0);
    for (k, uk) in pairs.iter().enumerate() {
        for (l, ul) in pairs.iter().enumerate().skip(k) {
            // Sums of tr(E P E' Q) over the four transpose combinations.
            let (mut t1, mut t2, mut t3, mut t4) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0));
            for &(i, j) in uk {
                for &(m, n) in ul {
                    t1 += p[(j, m)] * q[(n, i)];
                    t2 += p[(j, n)] * q[(m, i)];
                    t3 += p[(i, m)] * q[(n, j)];
                    t4 += p[(i, n)] * q[(m, j)];
                }
            }
            // The identity basis for lag 0 counts each diagonal entry once.
            let w = if k == 0 { 0.5 } else { 1.0 } * if l == 0 { 0.5 } else { 1.0 };
            let mut put = |a: usize, b: usize, z: C64| {
                let h = scale * w * z.re;
                hess[a * dim + b] += h;
                if a != b {
                    hess[b * dim + a] += h;
                }
            };
            let (rk, rl) = (if k == 0 { 0 } else { 2 * k - 1 }, if l == 0 { 0 } else { 2 * l - 1 });
            put(rk, rl, t1 + t2 + t3 + t4);
            if l > 0 {
                put(rk, rl + 1, im * (t1 - t2 + t3 - t4));
            }
            if k > 0 && l > k {
                put(rk + 1, rl, im * (t1 + t2 - t3 - t4));
            }
            if k > 0 && l > 0 {
                put(rk + 1, rl + 1, -(t1 - t2 - t3 + t4));
            }
        }
    }
}

/// Real gradient coordinates of `v -> Re tr(G M(v))` for Hermitian `G`.
fn lag_gradient(g: &CMatrix, pos: &[usize], n: usize) -> Vec<f64> {
    adjoint_on(g, pos, n).to_real()
}

struct Point {
    obj: f64,
    barrier: f64,
    x: Vec<f64>,
}

struct Inner<'a> {
    w: &'a SubproblemWeights,
    n: usize,
    full: Vec<usize>,
    pairs: Vec<Vec<(usize, usize)>>,
    toep_pairs: Vec<Vec<(usize, usize)>>,
}

impl<'a> Inner<'a> {
    fn new(w: &'a SubproblemWeights, n: usize) -> Self {
        let full: Vec<usize> = (0..n).collect();
        Self {
            pairs: lag_pairs(&w.pos, n),
            toep_pairs: lag_pairs(&full, n),
            full,
            w,
            n,
        }
    }

    fn eval(&self, x: &[f64]) -> Option<Point> {
        let v = LagVector::from_real(x);
        let obj = self.w.objective(&v)?;
        let barrier = -Cholesky::new(&toeplitz_embed(&v)).ok()?.log_det();
        (obj.is_finite() && barrier.is_finite()).then(|| Point {
            obj,
            barrier,
            x: x.to_vec(),
        })
    }

    /// Gradient and Hessian of `obj + mu * barrier`.
    fn derivatives(&self, x: &[f64], mu: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let v = LagVector::from_real(x);
        let dim = x.len();
        let s = add_diag_vec(&structured_on(&v, &self.w.pos), &self.w.d);
        let p = Cholesky::new(&s).ok()?.inverse();
        let q = p.matmul(&self.w.r_fit).matmul(&p);
        let tinv = Cholesky::new(&toeplitz_embed(&v)).ok()?.inverse();

        let mut grad = lag_gradient(&(&self.w.w - &q), &self.w.pos, self.n);
        let gb = lag_gradient(&tinv, &self.full, self.n);
        for (g, b) in grad.iter_mut().zip(gb) {
            *g -= mu * b;
        }

        let mut hess = vec![0.0; dim * dim];
        add_hessian(&mut hess, &self.pairs, &p, &q, 2.0);
        add_hessian(&mut hess, &self.toep_pairs, &tinv, &tinv, mu);
        Some((grad, hess))
    }

    fn newton_stage(&self, mut cur: Point, mu: f64, tol: f64, cfg: &BarrierConfig) -> Point {
        let dim = cur.x.len();
        for _ in 0..cfg.newton_iters {
            let Some((grad, hess)) = self.derivatives(&cur.x, mu) else {
                break;
            };
            let scale = (0..dim).map(|i| hess[i * dim + i].abs()).fold(0.0, f64::max).max(1e-300);
            let mut step = None;
            let mut jitter = 0.0;
            for _ in 0..12 {
                let mut h = hess.clone();
                for i in 0..dim {
                    h[i * dim + i] += jitter;
                }
                let mut rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
                if real_spd_solve(&h, dim, &mut rhs) {
                    step = Some(rhs);
                    break;
                }
                jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 100.0 };
            }
            let Some(step) = step else { break };
            let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
            let phi = cur.obj + mu * cur.barrier;
            if !(slope < 0.0) || -slope * 0.5 <= tol * (1.0 + phi.abs()) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = cur.x.iter().zip(&step).map(|(x, s)| x + t * s).collect();
                if let Some(p) = self.eval(&trial) {
                    if p.obj + mu * p.barrier <= phi + 1e-4 * t * slope {
                        accepted = Some(p);
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some(p) => cur = p,
                None => break,
            }
        }
        cur
    }
}

/// Solve the inner convex problem by barrier continuation with damped Newton steps.
///
/// Never returns a point with a larger objective than a feasible `start`.
pub fn solve_subproblem(w: &SubproblemWeights, start: &LagVector, cfg: &BarrierConfig) -> Result<LagVector> {
    let n = start.len();
    if n == 0 {
        return invalid("empty lag vector");
    }
    w.check(n)?;
    let start_obj = w.objective(start);
    let inner = Inner::new(w, n);

    let mut x = start.to_real();
    let base = x[0].abs().max(1e-8);
    let mut shift = 1e-3 * base;
    let mut cur = loop {
        if let Some(p) = inner.eval(&x) {
            break p;
        }
        x[0] += shift;
        shift *= 2.0;
        if !x[0].is_finite() || shift > 1e12 * base {
            return Err(Error::LineSearch("barrier initialization"));
        }
    };

    let mut mu = cfg.mu_start;
    loop {
        let last = mu <= cfg.mu_end * (1.0 + 1e-9);
        cur = inner.newton_stage(cur, mu, if last { cfg.tol } else { cfg.stage_tol }, cfg);
        if last {
            break;
        }
        mu = (mu * cfg.mu_factor).max(cfg.mu_end);
    }

    match start_obj {
        Some(s) if s <= cur.obj => Ok(start.clone()),
        _ => Ok(LagVector::from_real(&cur.x)),
    }
}

fn model_covariance(v: &LagVector, pos: &[usize], lambda: f64) -> CMatrix {
    structured_on(v, pos).add_diag(lambda)
}

fn check_lags(v: &LagVector, g: &ArrayGeometry) -> Result<Vec<usize>> {
    let pos = g.grid_positions()?;
    let n = *pos.last().unwrap() + 1;
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    Ok(pos)
}

/// `log det(T(v) + lambda I) + tr((T(v) + lambda I)^{-1} R)`.
pub fn ml_cost(v: &LagVector, lambda: f64, r: &CMatrix, g: &ArrayGeometry) -> Result<f64> {
    let pos = check_lags(v, g)?;
    let ch = Cholesky::new(&model_covariance(v, &pos, lambda))?;
    Ok(ch.log_det() + ch.solve(r).trace().re)
}

/// Gradient of [`ml_cost`] in the real coordinates of [`LagVector::to_real`].
pub fn ml_gradient(v: &LagVector, lambda: f64, r: &CMatrix, g: &ArrayGeometry) -> Result<Vec<f64>> {
    let pos = check_lags(v, g)?;
    let p = Cholesky::new(&model_covariance(v, &pos, lambda))?.inverse();
    let grad = &p - &p.matmul(r).matmul(&p);
    Ok(lag_gradient(&grad, &pos, v.len()))
}

/// Majorizer of [`ml_cost`] built at `v_k`, up to an additive constant:
/// `Re tr(W T(v)) + tr((T(v) + lambda I)^{-1} R)` with `W = (T(v_k) + lambda I)^{-1}`.
pub fn majorized_cost(v: &LagVector, v_k: &LagVector, lambda: f64, r: &CMatrix, g: &ArrayGeometry) -> Result<f64> {
    let pos = check_lags(v, g)?;
    let w = mm_weights(v_k, &pos, lambda, r)?;
    w.objective(v).ok_or(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN })
}

fn mm_weights(v_k: &LagVector, pos: &[usize], lambda: f64, r: &CMatrix) -> Result<SubproblemWeights> {
    Ok(SubproblemWeights {
        w: Cholesky::new(&model_covariance(v_k, pos, lambda))?.inverse(),
        d: vec![lambda; pos.len()],
        r_fit: r.clone(),
        pos: pos.to_vec(),
    })
}

/// Iterates and their ML costs (index 0 is the initialization).
#[derive(Clone, Debug)]
pub struct MleTrace {
    pub v: LagVector,
    pub iterates: Vec<LagVector>,
    pub costs: Vec<f64>,
}

/// MM iterations from `e_1` for a fixed number of outer steps.
pub fn structcov_mle(r: &CMatrix, g: &ArrayGeometry, cfg: &MleConfig) -> Result<LagVector> {
    Ok(structcov_mle_traced(r, g, cfg)?.v)
}

pub fn structcov_mle_traced(r: &CMatrix, g: &ArrayGeometry, cfg: &MleConfig) -> Result<MleTrace> {
    cfg.validate()?;
    let pos = g.grid_positions()?;
    if r.rows() != pos.len() || r.cols() != pos.len() {
        return Err(Error::DimensionMismatch {
            expected: pos.len(),
            got: r.rows(),
        });
    }
    if !r.is_finite() {
        return Err(Error::NonFinite("sample covariance"));
    }
    let n = *pos.last().unwrap() + 1;
    let mut v = LagVector::unit(n);
    let mut costs = vec![ml_cost(&v, cfg.lambda, r, g)?];
    let mut iterates = vec![v.clone()];
    for _ in 0..cfg.outer_iters {
        let w = mm_weights(&v, &pos, cfg.lambda, r)?;
        v = solve_subproblem(&w, &v, &cfg.barrier)?;
        costs.push(ml_cost(&v, cfg.lambda, r, g)?);
        iterates.push(v.clone());
    }
    Ok(MleTrace { v, iterates, costs })
}

/// Complete geometry split into observed and interpolated sensors.
#[derive(Clone, Debug)]
pub struct CompletionPlan {
    /// Sorted integer positions of the complete array.
    pub complete: Vec<usize>,
    /// Indices into `complete` of the physical sensors, in order.
    pub observed: Vec<usize>,
    /// Indices into `complete` of the interpolated sensors.
    pub missing: Vec<usize>,
}

impl CompletionPlan {
    pub fn new(g: &ArrayGeometry, extra: &[usize]) -> Result<Self> {
        let pos = g.grid_positions()?;
        let mut complete: Vec<usize> = pos.iter().chain(extra).copied().collect();
        complete.sort_unstable();
        complete.dedup();
        if complete.len() != pos.len() + extra.len() {
            return invalid("interpolated positions overlap the physical sensors");
        }
        if *complete.last().unwrap() != *pos.last().unwrap() {
            return invalid("interpolated positions must lie inside the aperture");
        }
        let (observed, missing) = (0..complete.len()).partition(|&i| pos.binary_search(&complete[i]).is_ok());
        Ok(Self {
            complete,
            observed,
            missing,
        })
    }

    /// No interpolation.
    pub fn none(g: &ArrayGeometry) -> Result<Self> {
        Self::new(g, &[])
    }

    /// Fill in the sensors that turn `g` into a nested array.
    pub fn nested(g: &ArrayGeometry) -> Result<Self> {
        Self::new(g, &nested_completion(g)?)
    }

    pub fn len(&self) -> usize {
        self.complete.len()
    }

    pub fn is_empty(&self) -> bool {
        self.complete.is_empty()
    }

    pub fn lag_len(&self) -> usize {
        *self.complete.last().unwrap() + 1
    }

    pub fn complete_geometry(&self) -> ArrayGeometry {
        ArrayGeometry::from_integers(&self.complete).expect("complete positions are valid")
    }

    fn noise(&self, lambda_o: f64, lambda_m: f64) -> Vec<f64> {
        let mut d = vec![lambda_o; self.len()];
        for &i in &self.missing {
            d[i] = lambda_m;
        }
        d
    }

    fn observed_positions(&self) -> Vec<usize> {
        self.observed.iter().map(|&i| self.complete[i]).collect()
    }
}

/// Conditional expectation of the complete-data sample covariance given the observed snapshots.
pub fn em_estep(v: &LagVector, y_o: &SnapshotMatrix, plan: &CompletionPlan, lambda_o: f64, lambda_m: f64) -> Result<CMatrix> {
    if v.len() != plan.lag_len() {
        return Err(Error::DimensionMismatch {
            expected: plan.lag_len(),
            got: v.len(),
        });
    }
    if y_o.sensors() != plan.observed.len() {
        return Err(Error::DimensionMismatch {
            expected: plan.observed.len(),
            got: y_o.sensors(),
        });
    }
    let r_oo = scm(y_o);
    let (o, m) = (&plan.observed, &plan.missing);
    let sigma = add_diag_vec(&structured_on(v, &plan.complete), &plan.noise(lambda_o, lambda_m));
    let mut out = CMatrix::zeros(plan.len(), plan.len());
    let place = |out: &mut CMatrix, rows: &[usize], cols: &[usize], blk: &CMatrix| {
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                out[(i, j)] = blk[(a, b)];
            }
        }
    };
    place(&mut out, o, o, &r_oo);
    if m.is_empty() {
        return Ok(out);
    }
    let s_oo = sigma.select(o, o);
    let s_om = sigma.select(o, m);
    let s_mm = sigma.select(m, m);
    // K = Sigma_mo Sigma_oo^{-1} = (Sigma_oo^{-1} Sigma_om)^H
    let k = Cholesky::new(&s_oo)?.solve(&s_om).adjoint();
    let r_mo = k.matmul(&r_oo);
    let r_mm = &(&s_mm - &k.matmul(&s_om)) + &r_mo.matmul(&k.adjoint());
    place(&mut out, m, o, &r_mo);
    place(&mut out, o, m, &r_mo.adjoint());
    place(&mut out, m, m, &r_mm.symmetrize());
    Ok(out)
}

/// Negative log-likelihood of the observed data under the complete-data model.
pub fn observed_cost(v: &LagVector, y_o: &SnapshotMatrix, plan: &CompletionPlan, lambda_o: f64) -> Result<f64> {
    let ch = Cholesky::new(&model_covariance(v, &plan.observed_positions(), lambda_o))?;
    Ok(ch.log_det() + ch.solve(&scm(y_o)).trace().re)
}

/// EM majorizer built at `v_k` with conditional covariance `r_tilde`:
/// `Re tr(B^{-1} T_c(v)) + tr(Sigma(v)^{-1} r_tilde)` with `B = Sigma(v_k)`.
pub fn em_majorized_cost(
    v: &LagVector,
    v_k: &LagVector,
    r_tilde: &CMatrix,
    plan: &CompletionPlan,
    lambda_o: f64,
    lambda_m: f64,
) -> Result<f64> {
    let w = em_weights(v_k, r_tilde, plan, lambda_o, lambda_m)?;
    w.objective(v).ok_or(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN })
}

fn em_weights(v_k: &LagVector, r_tilde: &CMatrix, plan: &CompletionPlan, lambda_o: f64, lambda_m: f64) -> Result<SubproblemWeights> {
    let d = plan.noise(lambda_o, lambda_m);
    let b = add_diag_vec(&structured_on(v_k, &plan.complete), &d);
    Ok(SubproblemWeights {
        w: Cholesky::new(&b)?.inverse(),
        d,
        r_fit: r_tilde.clone(),
        pos: plan.complete.clone(),
    })
}

/// EM iterations: an E-step per outer loop, followed by `inner_iters` MM subproblem solves.
/// `costs` holds the observed-data cost after every outer loop.
pub fn em_gridless_traced(y_o: &SnapshotMatrix, plan: &CompletionPlan, cfg: &MleConfig) -> Result<MleTrace> {
    cfg.validate()?;
    let n = plan.lag_len();
    let mut v = LagVector::unit(n);
    let mut costs = vec![observed_cost(&v, y_o, plan, cfg.lambda)?];
    let mut iterates = vec![v.clone()];
    for _ in 0..cfg.outer_iters {
        let r_tilde = em_estep(&v, y_o, plan, cfg.lambda, cfg.lambda_m)?;
        for _ in 0..cfg.inner_iters {
            let w = em_weights(&v, &r_tilde, plan, cfg.lambda, cfg.lambda_m)?;
            v = solve_subproblem(&w, &v, &cfg.barrier)?;
            iterates.push(v.clone());
        }
        costs.push(observed_cost(&v, y_o, plan, cfg.lambda)?);
    }
    Ok(MleTrace { v, iterates, costs })
}

pub fn em_gridless(y_o: &SnapshotMatrix, plan: &CompletionPlan, cfg: &MleConfig) -> Result<LagVector> {
    Ok(em_gridless_traced(y_o, plan, cfg)?.v)
}
