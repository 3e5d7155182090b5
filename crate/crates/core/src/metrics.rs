//! Error metrics, Gaussian KL divergence and the stochastic Cramér–Rao bound.

use crate::error::{invalid, Error, Result};
use crate::estimate::DoaEstimate;
use crate::geometry::ArrayGeometry;
use crate::numerics::{real_inverse, CMatrix, Cholesky, C64};
use crate::sigmodel::{manifold_matrix, SourceScene};

/// Estimates paired with the truth so that the total absolute error is minimal.
/// On the line this is the sorted-order pairing.
pub fn assign(est: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: est.len(),
        });
    }
    let mut e = est.to_vec();
    e.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]));
    let mut out = vec![0.0; truth.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = e[rank];
    }
    Ok(out)
}

/// Per-source signed errors `u_hat - u` after assignment.
pub fn errors(est: &DoaEstimate, truth: &[f64]) -> Result<Vec<f64>> {
    Ok(assign(&est.u, truth)?.iter().zip(truth).map(|(a, b)| a - b).collect())
}

pub fn rmse_u(estimates: &[DoaEstimate], truth: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return invalid("no estimates");
    }
    let mut acc = 0.0;
    for e in estimates {
        acc += errors(e, truth)?.iter().map(|x| x * x).sum::<f64>();
    }
    Ok((acc / (estimates.len() * truth.len()) as f64).sqrt())
}

/// Mean signed error of source `k` over trials.
pub fn empirical_bias(estimates: &[DoaEstimate], truth: &[f64], k: usize) -> Result<f64> {
    if estimates.is_empty() {
        return invalid("no estimates");
    }
    if k >= truth.len() {
        return invalid(format!("source index {k} out of range"));
    }
    let mut acc = 0.0;
    for e in estimates {
        acc += errors(e, truth)?[k];
    }
    Ok(acc / estimates.len() as f64)
}

/// Fraction of trials whose every error is below half the smallest source gap.
pub fn success_rate(estimates: &[DoaEstimate], truth: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return invalid("no estimates");
    }
    let mut sorted = truth.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min) / 2.0;
    let mut hits = 0usize;
    for e in estimates {
        if errors(e, truth)?.iter().all(|x| x.abs() < cap) {
            hits += 1;
        }
    }
    Ok(hits as f64 / estimates.len() as f64)
}

/// `KL(N(0, R) || N(0, Sigma))` for circular complex Gaussians.
pub fn kl_gaussian(r: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    let cr = Cholesky::new(r)?;
    let cs = Cholesky::new(sigma)?;
    let m = r.rows() as f64;
    Ok((cs.log_det() - cr.log_det() - m + cs.solve(r).trace().re).max(0.0))
}

/// Hermitian source covariance from its real parameters: diagonal first, then
/// `(Re, Im)` of each strictly upper entry in row order.
fn source_cov_from(params: &[f64], k: usize) -> CMatrix {
    let mut p = CMatrix::zeros(k, k);
    for i in 0..k {
        p[(i, i)] = C64::new(params[i], 0.0);
    }
    let mut idx = k;
    for i in 0..k {
        for j in i + 1..k {
            let z = C64::new(params[idx], params[idx + 1]);
            p[(i, j)] = z;
            p[(j, i)] = z.conj();
            idx += 2;
        }
    }
    p
}

/// Stochastic CRB on each `u_k` for `l` snapshots, with unknown source covariance
/// and noise variance as nuisance parameters.
pub fn crb_stochastic(scene: &SourceScene, g: &ArrayGeometry, l: usize) -> Result<Vec<f64>> {
    scene.validate()?;
    let k = scene.k();
    if k >= g.len() {
        return invalid(format!("{k} sources need more than {k} sensors"));
    }
    if l == 0 {
        return invalid("snapshot count must be positive");
    }
    let ps = scene.source_covariance();
    let mut theta: Vec<f64> = scene.u.clone();
    theta.extend((0..k).map(|i| ps[(i, i)].re));
    for i in 0..k {
        for j in i + 1..k {
            theta.push(ps[(i, j)].re);
            theta.push(ps[(i, j)].im);
        }
    }
    theta.push(scene.noise_var);
    let model = |t: &[f64]| {
        let a = manifold_matrix(&t[..k], g);
        let p = source_cov_from(&t[k..t.len() - 1], k);
        a.matmul(&p).matmul(&a.adjoint()).add_diag(t[t.len() - 1])
    };
    let n = theta.len();
    let h = 1e-6;
    let rinv = Cholesky::new(&model(&theta))?.inverse();
    let derivs: Vec<CMatrix> = (0..n)
        .map(|i| {
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[i] += h;
            tm[i] -= h;
            rinv.matmul(&(&model(&tp) - &model(&tm)).scale(0.5 / h))
        })
        .collect();
    let mut fim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let f = l as f64 * derivs[i].trace_product(&derivs[j]).re;
            fim[i * n + j] = f;
            fim[j * n + i] = f;
        }
    }
    let inv = real_inverse(&fim, n).ok_or_else(|| Error::InvalidArgument("Fisher information is singular".into()))?;
    let out: Vec<f64> = (0..k).map(|i| inv[i * n + i]).collect();
    if out.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::NonFinite("Cramér–Rao bound"));
    }
    Ok(out)
}

/// Root of the average per-source bound, comparable to an RMSE.
pub fn crb_rmse(scene: &SourceScene, g: &ArrayGeometry, l: usize) -> Result<f64> {
    let b = crb_stochastic(scene, g, l)?;
    Ok((b.iter().sum::<f64>() / b.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn rmse_examples() {
        let truth = [-0.2, 0.3];
        let exact = DoaEstimate::new(truth.to_vec());
        assert_eq!(rmse_u(&[exact.clone()], &truth).unwrap(), 0.0);
        assert!((rmse_u(&[DoaEstimate::new(vec![0.51])], &[0.5]).unwrap() - 0.01).abs() < 1e-12);
        let off = DoaEstimate::new(vec![-0.18, 0.32]);
        let v = rmse_u(&[exact, off], &truth).unwrap();
        assert!((v - 0.0141421356).abs() < 1e-9);
        assert!(rmse_u(&[DoaEstimate::new(vec![0.1])], &truth).is_err());
    }

    #[test]
    fn sorted_assignment_is_optimal() {
        let mut rg = rng(12);
        for _ in 0..200 {
            let k = rg.gen_range(1..=5);
            let truth: Vec<f64> = (0..k).map(|_| rg.gen_range(-1.0..1.0)).collect();
            let mut est: Vec<f64> = (0..k).map(|_| rg.gen_range(-1.0..1.0)).collect();
            let a = assign(&est, &truth).unwrap();
            let cost: f64 = a.iter().zip(&truth).map(|(x, y)| (x - y).abs()).sum();
            let mut best = f64::INFINITY;
            permute(&mut est.clone(), 0, &mut |p| {
                best = best.min(p.iter().zip(&truth).map(|(x, y)| (x - y).abs()).sum());
            });
            assert!(cost <= best + 1e-12);
            est.shuffle(&mut rg);
            assert_eq!(assign(&est, &truth).unwrap(), a);
        }
    }

    fn permute(v: &mut Vec<f64>, i: usize, f: &mut impl FnMut(&[f64])) {
        if i == v.len() {
            f(v);
            return;
        }
        for j in i..v.len() {
            v.swap(i, j);
            permute(v, i + 1, f);
            v.swap(i, j);
        }
    }

    #[test]
    fn bias_examples() {
        let truth = [0.1];
        let sym = [DoaEstimate::new(vec![0.12]), DoaEstimate::new(vec![0.08])];
        assert!(empirical_bias(&sym, &truth, 0).unwrap().abs() < 1e-15);
        let off = [DoaEstimate::new(vec![0.13]), DoaEstimate::new(vec![0.13])];
        assert!((empirical_bias(&off, &truth, 0).unwrap() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let mut rg = rng(1);
        for _ in 0..1000 {
            let (a, b) = (random_pd(&mut rg, 3), random_pd(&mut rg, 3));
            assert!(kl_gaussian(&a, &b).unwrap() >= 0.0);
            assert!(kl_gaussian(&a, &a).unwrap() < 1e-12);
        }
        let e = std::f64::consts::E;
        let v = kl_gaussian(&CMatrix::from_diag(&[1.0]), &CMatrix::from_diag(&[e])).unwrap();
        assert!((v - 1.0 / e).abs() < 1e-12);
    }

    #[test]
    fn crb_scaling_and_monotonicity() {
        let g = ArrayGeometry::ula(6);
        let scene = SourceScene::from_snr(vec![-0.5, 0.5], &[10.0, 10.0]).unwrap();
        let a = crb_stochastic(&scene, &g, 100).unwrap();
        let b = crb_stochastic(&scene, &g, 200).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x / y - 2.0).abs() < 1e-6);
        }
        assert!((a[0] / a[1] - 1.0).abs() < 1e-6);
        let mut last = f64::INFINITY;
        for snr in (0..=30).step_by(3) {
            let s = SourceScene::from_snr(vec![0.2], &[snr as f64]).unwrap();
            let c = crb_stochastic(&s, &g, 50).unwrap()[0];
            assert!(c < last);
            last = c;
        }
    }

    #[test]
    fn success_rate_caps_at_half_gap() {
        let truth = [0.0, 0.2];
        let est = [DoaEstimate::new(vec![0.05, 0.2]), DoaEstimate::new(vec![0.11, 0.2])];
        assert_eq!(success_rate(&est, &truth).unwrap(), 0.5);
    }
}
