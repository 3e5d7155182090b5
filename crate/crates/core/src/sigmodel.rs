//! Synthetic narrowband snapshots and the covariance statistics built from them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{coarray, ArrayGeometry};
use crate::numerics::{herm_eig, CMatrix, Cholesky, C64, ZERO};

/// Steering vector with entries `exp(-j pi p_m u)`.
pub fn manifold(u: f64, g: &ArrayGeometry) -> Vec<C64> {
    g.positions()
        .iter()
        .map(|&p| C64::from_polar(1.0, -PI * p * u))
        .collect()
}

/// `M x G` dictionary of steering vectors.
pub fn manifold_matrix(us: &[f64], g: &ArrayGeometry) -> CMatrix {
    let cols: Vec<Vec<C64>> = us.iter().map(|&u| manifold(u, g)).collect();
    CMatrix::from_fn(g.len(), us.len(), |i, j| cols[j][i])
}

/// Far-field sources seen by the array.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceScene {
    /// Directions in `u = sin(theta)`, strictly increasing.
    pub u: Vec<f64>,
    /// Linear powers.
    pub powers: Vec<f64>,
    /// Correlation coefficient applied to `pair`.
    pub rho: C64,
    pub pair: (usize, usize),
    pub noise_var: f64,
}

impl SourceScene {
    /// Uncorrelated sources with unit noise and per-source SNR in dB.
    pub fn from_snr(u: Vec<f64>, snr_db: &[f64]) -> Result<Self> {
        let powers = snr_db.iter().map(|s| 10f64.powf(s / 10.0)).collect();
        let scene = Self {
            u,
            powers,
            rho: ZERO,
            pair: (0, 1),
            noise_var: 1.0,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn with_rho(mut self, rho_abs: f64, rho_phase: f64) -> Result<Self> {
        self.rho = C64::from_polar(rho_abs, rho_phase);
        self.validate()?;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.is_empty() {
            return invalid("scene needs at least one source");
        }
        if self.u.len() != self.powers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.u.len(),
                got: self.powers.len(),
            });
        }
        if self.u.iter().any(|u| !(-1.0..1.0).contains(u)) {
            return invalid("source directions must lie in [-1, 1)");
        }
        if self.u.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("source directions must be strictly increasing");
        }
        if self.powers.iter().any(|&p| !(p > 0.0)) {
            return invalid("source powers must be positive");
        }
        if !(self.noise_var > 0.0) {
            return invalid("noise variance must be positive");
        }
        if self.rho.norm() > 1.0 + 1e-12 {
            return invalid("|rho| must not exceed 1");
        }
        if self.rho != ZERO {
            let (a, b) = self.pair;
            if a == b || a >= self.k() || b >= self.k() {
                return invalid("correlated pair must name two distinct sources");
            }
        }
        Ok(())
    }

    /// Source covariance `R_x`.
    pub fn source_covariance(&self) -> CMatrix {
        let mut rx = CMatrix::from_diag(&self.powers);
        if self.rho != ZERO {
            let (a, b) = self.pair;
            let c = self.rho * (self.powers[a] * self.powers[b]).sqrt();
            rx[(a, b)] = c;
            rx[(b, a)] = c.conj();
        }
        rx
    }

    /// `Phi R_x Phi^H + noise_var I`.
    pub fn covariance(&self, g: &ArrayGeometry) -> CMatrix {
        let phi = manifold_matrix(&self.u, g);
        phi.matmul(&self.source_covariance())
            .matmul(&phi.adjoint())
            .add_diag(self.noise_var)
    }
}

/// Array snapshots. `snapshots` is the count used for normalization, which
/// may exceed the number of columns after [`reduce_snapshots`].
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    pub data: CMatrix,
    pub snapshots: usize,
}

impl SnapshotMatrix {
    pub fn new(data: CMatrix) -> Self {
        let snapshots = data.cols();
        Self { data, snapshots }
    }

    pub fn sensors(&self) -> usize {
        self.data.rows()
    }
}

/// Independent random streams drawn for one trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Source = 1,
    Noise = 2,
    Aux = 3,
}

/// Counter-based generator keyed by `(seed, trial, stream)`.
pub fn stream_rng(seed: u64, trial: u64, stream: Stream) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(b"structcv");
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(stream as u64);
    rng
}

/// Standard circular complex Gaussian via Box–Muller.
pub fn complex_gaussian(rng: &mut impl Rng) -> C64 {
    let u1: f64 = loop {
        let x: f64 = rng.gen();
        if x > 0.0 {
            break x;
        }
    };
    let u2: f64 = rng.gen();
    let r = (-u1.ln()).sqrt();
    C64::from_polar(r, 2.0 * PI * u2)
}

fn coloring(rx: &CMatrix) -> Result<CMatrix> {
    match Cholesky::new(rx) {
        Ok(ch) => Ok(ch.factor().clone()),
        Err(_) => {
            // Singular but PSD (e.g. |rho| = 1): color with V diag(sqrt(w)).
            let e = herm_eig(rx)?;
            let scale = e.max().abs().max(1e-300);
            if e.min() < -1e-10 * scale {
                return invalid("source covariance is not positive semidefinite");
            }
            let n = rx.rows();
            Ok(CMatrix::from_fn(n, n, |i, j| {
                e.vectors[(i, j)] * e.values[j].max(0.0).sqrt()
            }))
        }
    }
}

/// Draw `Y = Phi X + N` for one trial.
pub fn simulate_trial(
    scene: &SourceScene,
    g: &ArrayGeometry,
    l: usize,
    seed: u64,
    trial: u64,
) -> Result<SnapshotMatrix> {
    if l == 0 {
        return invalid("need at least one snapshot");
    }
    scene.validate()?;
    let k = scene.k();
    let color = coloring(&scene.source_covariance())?;
    let mut src = stream_rng(seed, trial, Stream::Source);
    let white = CMatrix::from_fn(k, l, |_, _| complex_gaussian(&mut src));
    let x = color.matmul(&white);
    let phi = manifold_matrix(&scene.u, g);
    let mut y = phi.matmul(&x);
    let mut noise = stream_rng(seed, trial, Stream::Noise);
    let sigma = scene.noise_var.sqrt();
    for j in 0..l {
        for z in y.col_mut(j) {
            *z += complex_gaussian(&mut noise) * sigma;
        }
    }
    Ok(SnapshotMatrix::new(y))
}

pub fn simulate(scene: &SourceScene, g: &ArrayGeometry, l: usize, seed: u64) -> Result<SnapshotMatrix> {
    simulate_trial(scene, g, l, seed, 0)
}

/// Sample covariance `Y Y^H / L`.
pub fn scm(y: &SnapshotMatrix) -> CMatrix {
    y.data
        .matmul(&y.data.adjoint())
        .scale(1.0 / y.snapshots as f64)
        .symmetrize()
}

/// Forward–backward average `(R + J R^T J) / 2`.
pub fn fb_average(r: &CMatrix) -> CMatrix {
    let n = r.rows();
    CMatrix::from_fn(n, n, |i, j| (r[(i, j)] + r[(n - 1 - j, n - 1 - i)]) * 0.5)
}

/// Average correlation at each lag `p_a - p_b` in `-(mc-1)..=(mc-1)`.
fn lag_average(r: &CMatrix, pos: &[usize], mc: usize) -> Vec<C64> {
    let span = 2 * mc - 1;
    let mut sum = vec![ZERO; span];
    let mut count = vec![0usize; span];
    for (a, &pa) in pos.iter().enumerate() {
        for (b, &pb) in pos.iter().enumerate() {
            let lag = pa as i64 - pb as i64;
            if lag.unsigned_abs() as usize >= mc {
                continue;
            }
            let idx = (lag + mc as i64 - 1) as usize;
            sum[idx] += r[(a, b)];
            count[idx] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Smoothed covariance from `z` ordered by decreasing lag, `z[k] = r(mc - 1 - k)`.
pub(crate) fn smooth_from_lags(z: &[C64]) -> CMatrix {
    let mc = (z.len() + 1) / 2;
    let mut out = CMatrix::zeros(mc, mc);
    for i in 0..mc {
        let sub: Vec<C64> = (0..mc).map(|m| z[i + mc - 1 - m]).collect();
        out = &out + &CMatrix::outer(&sub);
    }
    out.scale(1.0 / mc as f64)
}

/// Spatially smoothed covariance over the contiguous coarray segment.
pub fn spatial_smooth(r: &CMatrix, g: &ArrayGeometry) -> Result<CMatrix> {
    let lag = coarray(g)?;
    let mc = lag.contiguous;
    if mc < 2 {
        return invalid(format!("spatial smoothing needs >= 2 contiguous lags, have {mc}"));
    }
    let pos = g.grid_positions()?;
    if r.rows() != pos.len() {
        return Err(Error::DimensionMismatch {
            expected: pos.len(),
            got: r.rows(),
        });
    }
    // Index 0 of lag_average is lag -(mc-1); reverse to get decreasing lag.
    let mut z = lag_average(r, &pos, mc);
    z.reverse();
    Ok(smooth_from_lags(&z))
}

/// Replace `Y` by at most `M` columns with the same `Y Y^H`.
pub fn reduce_snapshots(y: &SnapshotMatrix) -> Result<SnapshotMatrix> {
    let m = y.sensors();
    if y.data.cols() <= m {
        return Ok(y.clone());
    }
    let gram = y.data.matmul(&y.data.adjoint()).symmetrize();
    let e = herm_eig(&gram)?;
    let tol = 1e-12 * e.max().abs().max(1e-300);
    let keep: Vec<usize> = (0..m).rev().filter(|&k| e.values[k] > tol).collect();
    let data = CMatrix::from_fn(m, keep.len(), |i, j| {
        e.vectors[(i, keep[j])] * e.values[keep[j]].sqrt()
    });
    Ok(SnapshotMatrix {
        data,
        snapshots: y.snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{toeplitz_embed, LagVector};
    use crate::numerics::testutil::*;
    use crate::numerics::ONE;

    fn scene2(rho_abs: f64) -> SourceScene {
        SourceScene::from_snr(vec![-0.25, 0.25], &[0.0, 0.0])
            .unwrap()
            .with_rho(rho_abs, 0.8654f64.atan2(0.5010))
            .unwrap()
    }

    #[test]
    fn manifold_values() {
        let g = ArrayGeometry::ula(5);
        assert!(manifold(0.0, &g).iter().all(|z| (z - ONE).norm() < 1e-15));
        let m = manifold(1.0, &ArrayGeometry::ula(2));
        assert!((m[0] - ONE).norm() < 1e-15 && (m[1] + ONE).norm() < 1e-15);
        let m = manifold(0.5, &ArrayGeometry::from_integers(&[0, 1, 3]).unwrap());
        let want = [ONE, C64::new(0.0, -1.0), C64::new(0.0, 1.0)];
        for (a, b) in m.iter().zip(want) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn simulate_is_reproducible() {
        let g = ArrayGeometry::ula(4);
        let s = scene2(0.5);
        let a = simulate_trial(&s, &g, 20, 42, 3).unwrap();
        let b = simulate_trial(&s, &g, 20, 42, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_trial(&s, &g, 20, 42, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_single_snapshot_is_rank_one() {
        let g = ArrayGeometry::ula(5);
        let mut s = SourceScene::from_snr(vec![0.2], &[10.0]).unwrap();
        s.noise_var = 1e-30;
        let y = simulate(&s, &g, 1, 1).unwrap();
        let e = herm_eig(&scm(&y)).unwrap();
        assert!(e.values[..4].iter().all(|x| x.abs() < 1e-10 * e.max()));
    }

    #[test]
    fn uncorrelated_sources_decorrelate() {
        let g = ArrayGeometry::ula(1);
        let s = scene2(0.0);
        let l = 100_000;
        let rx = s.source_covariance();
        let color = coloring(&rx).unwrap();
        let mut src = stream_rng(5, 0, Stream::Source);
        let white = CMatrix::from_fn(2, l, |_, _| complex_gaussian(&mut src));
        let x = color.matmul(&white);
        let c = x.matmul(&x.adjoint()).scale(1.0 / l as f64);
        let rho_hat = c[(0, 1)] / (c[(0, 0)].re * c[(1, 1)].re).sqrt();
        assert!(rho_hat.norm() < 0.02, "{rho_hat}");
        let _ = g;
    }

    #[test]
    fn correlated_pair_matches_requested_rho() {
        let s = SourceScene::from_snr(vec![-0.25, 0.25], &[3.0, 6.0])
            .unwrap()
            .with_rho(0.9, 0.8654f64.atan2(0.5010))
            .unwrap();
        let color = coloring(&s.source_covariance()).unwrap();
        let l = 100_000;
        let mut src = stream_rng(9, 0, Stream::Source);
        let white = CMatrix::from_fn(2, l, |_, _| complex_gaussian(&mut src));
        let x = color.matmul(&white);
        let c = x.matmul(&x.adjoint()).scale(1.0 / l as f64);
        let want = s.rho * (s.powers[0] * s.powers[1]).sqrt();
        assert!((c[(0, 1)] - want).norm() < 0.03 * want.norm(), "{} vs {}", c[(0, 1)], want);
        let unit = s.rho / s.rho.norm();
        assert!((unit - C64::new(0.5010, 0.8654)).norm() < 1e-3);
    }

    #[test]
    fn fully_coherent_pair_still_simulates() {
        let g = ArrayGeometry::ula(4);
        let s = scene2(1.0);
        assert!(simulate(&s, &g, 10, 3).is_ok());
    }

    #[test]
    fn scm_converges_to_model() {
        let g = ArrayGeometry::ula(4);
        let s = SourceScene::from_snr(vec![-0.3, 0.4], &[10.0, 5.0])
            .unwrap()
            .with_rho(0.5, 1.0)
            .unwrap();
        let r = scm(&simulate(&s, &g, 100_000, 17).unwrap());
        let truth = s.covariance(&g);
        assert!((&r - &truth).norm_fro() / truth.norm_fro() < 0.05);
    }

    #[test]
    fn scm_basic_cases() {
        let y = vec![C64::new(1.0, 2.0), C64::new(-0.5, 0.0)];
        let r = scm(&SnapshotMatrix::new(CMatrix::column_vector(&y)));
        assert_eq!(r, CMatrix::outer(&y));
        let r = scm(&SnapshotMatrix::new(CMatrix::identity(3)));
        assert_eq!(r, CMatrix::identity(3).scale(1.0 / 3.0));
        let mut rg = rng(1);
        let y = random_matrix(&mut rg, 6, 3);
        let e = herm_eig(&scm(&SnapshotMatrix::new(y))).unwrap();
        assert!(e.min() > -1e-12);
    }

    #[test]
    fn fb_examples() {
        let v = LagVector::new(vec![C64::new(2.0, 0.0), C64::new(0.3, 0.7), C64::new(-0.1, 0.2)]);
        let t = toeplitz_embed(&v);
        assert!((&fb_average(&t) - &t).norm_fro() < 1e-15);

        let e1 = CMatrix::outer(&[ONE, ZERO]);
        assert_eq!(fb_average(&e1), CMatrix::identity(2).scale(0.5));

        let g = ArrayGeometry::ula(6);
        let r = CMatrix::outer(&manifold(0.3, &g)).scale(2.0);
        let rfb = fb_average(&r);
        let e = herm_eig(&rfb).unwrap();
        let big = e.values.iter().filter(|&&x| x > 1e-10 * e.max()).count();
        assert!(big <= 2);

        let mut rg = rng(4);
        let a = random_pd(&mut rg, 5);
        let f = fb_average(&a);
        let persym = CMatrix::from_fn(5, 5, |i, j| f[(4 - j, 4 - i)]);
        assert!((&persym - &f).norm_fro() < 1e-14);
        assert!(f.hermitian_defect() < 1e-14);
        assert!(herm_eig(&f).unwrap().min() > 0.0);
    }

    #[test]
    fn smoothing_formula_instance() {
        let a = C64::new(0.3, 0.1);
        let b = C64::new(2.0, 0.0);
        let c = C64::new(0.3, -0.1);
        let rz = smooth_from_lags(&[a, b, c]);
        let want = (&CMatrix::outer(&[b, a]) + &CMatrix::outer(&[c, b])).scale(0.5);
        assert!((&rz - &want).norm_fro() < 1e-15);
    }

    #[test]
    fn smoothing_ula_equals_square_over_m() {
        let g = ArrayGeometry::ula(5);
        let s = SourceScene::from_snr(vec![-0.4, 0.1], &[3.0, 0.0]).unwrap();
        let r = s.covariance(&g);
        let rz = spatial_smooth(&r, &g).unwrap();
        let want = r.matmul(&r).scale(1.0 / 5.0);
        assert!((&rz - &want).norm_fro() < 1e-12 * want.norm_fro());
        assert!(herm_eig(&rz).unwrap().min() > -1e-10);
    }

    #[test]
    fn smoothing_nested_uses_contiguous_run() {
        let g = ArrayGeometry::from_integers(&[0, 1, 2, 3, 7, 11]).unwrap();
        let s = SourceScene::from_snr(vec![-0.5, 0.2, 0.6], &[10.0, 10.0, 10.0]).unwrap();
        let rz = spatial_smooth(&s.covariance(&g), &g).unwrap();
        assert_eq!(rz.rows(), coarray(&g).unwrap().contiguous);
        assert!(herm_eig(&rz).unwrap().min() > -1e-9);

        let nula = ArrayGeometry::from_integers(&[0, 2, 5]).unwrap();
        assert!(spatial_smooth(&CMatrix::identity(3), &nula).is_err());
    }

    #[test]
    fn reduction_preserves_gram() {
        let mut rg = rng(8);
        let y = SnapshotMatrix::new(random_matrix(&mut rg, 6, 500));
        let red = reduce_snapshots(&y).unwrap();
        assert_eq!(red.data.cols(), 6);
        assert_eq!(red.snapshots, 500);
        let a = y.data.matmul(&y.data.adjoint());
        let b = red.data.matmul(&red.data.adjoint());
        assert!((&a - &b).norm_fro() <= 1e-10 * a.norm_fro());

        let small = SnapshotMatrix::new(random_matrix(&mut rg, 6, 4));
        assert_eq!(reduce_snapshots(&small).unwrap(), small);

        let base = random_matrix(&mut rg, 6, 2);
        let dup = CMatrix::from_fn(6, 10, |i, j| base[(i, j % 2)]);
        let red = reduce_snapshots(&SnapshotMatrix::new(dup.clone())).unwrap();
        assert_eq!(red.data.cols(), 2);
        let a = dup.matmul(&dup.adjoint());
        let b = red.data.matmul(&red.data.adjoint());
        assert!((&a - &b).norm_fro() <= 1e-10 * a.norm_fro());
    }
}
