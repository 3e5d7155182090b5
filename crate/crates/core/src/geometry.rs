//! Sensor geometries, difference coarrays and the structured covariance map.
//!
//! Positions are measured in half-wavelength units. For on-grid arrays the
//! covariance of any uncorrelated-source model has entry `(i, j)` depending
//! only on the lag `p_j - p_i`, which is what [`structured_matrix`] encodes.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::numerics::{CMatrix, C64, ZERO};

/// Linear array with `positions[0] == 0` and strictly increasing positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<f64>,
    on_grid: bool,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return invalid("geometry needs at least one sensor");
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("sensor positions"));
        }
        if positions[0] != 0.0 {
            return invalid(format!("first sensor must sit at 0, got {}", positions[0]));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("sensor positions must be strictly increasing");
        }
        let on_grid = positions.iter().all(|p| p.fract() == 0.0);
        Ok(Self { positions, on_grid })
    }

    pub fn from_integers(positions: &[usize]) -> Result<Self> {
        Self::new(positions.iter().map(|&p| p as f64).collect())
    }

    pub fn ula(m: usize) -> Self {
        Self::new((0..m).map(|p| p as f64).collect()).expect("ULA is valid")
    }

    /// Nested array with inner ULA of `inner` sensors and `outer` sparse sensors.
    pub fn nested(inner: usize, outer: usize) -> Self {
        let pos = nested_positions(inner, outer);
        Self::from_integers(&pos).expect("nested array is valid")
    }

    /// Parse the comma-separated literal used in configs, e.g. `"0,1,2,3,7,11"`.
    pub fn parse(literal: &str) -> Result<Self> {
        let mut positions = Vec::new();
        for tok in literal.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            let p: f64 = tok
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad sensor position `{tok}`")))?;
            positions.push(p);
        }
        Self::new(positions)
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn on_grid(&self) -> bool {
        self.on_grid
    }

    /// Integer positions; errors for off-grid geometries.
    pub fn grid_positions(&self) -> Result<Vec<usize>> {
        if !self.on_grid {
            return Err(Error::OffGrid);
        }
        Ok(self.positions.iter().map(|&p| p as usize).collect())
    }

    /// `max(lag) + 1` for on-grid arrays.
    pub fn aperture(&self) -> Result<usize> {
        Ok(*self.grid_positions()?.last().unwrap() + 1)
    }
}

impl fmt::Display for ArrayGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.positions.iter().map(|p| format!("{p}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

pub(crate) fn nested_positions(inner: usize, outer: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..inner).collect();
    pos.extend((1..=outer).map(|k| k * (inner + 1) - 1));
    pos
}

/// Difference coarray summary for an on-grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LagStructure {
    /// Full symmetric lag set, ascending.
    pub lags: Vec<i64>,
    /// Non-negative lags, ascending.
    pub nonneg: Vec<usize>,
    pub aperture: usize,
    /// Length of the contiguous run of non-negative lags starting at 0.
    pub contiguous: usize,
    pub holes: Vec<usize>,
}

impl LagStructure {
    pub fn hole_free(&self) -> bool {
        self.holes.is_empty()
    }
}

pub fn coarray(g: &ArrayGeometry) -> Result<LagStructure> {
    let pos = g.grid_positions()?;
    let mut set = BTreeSet::new();
    for &a in &pos {
        for &b in &pos {
            set.insert(a as i64 - b as i64);
        }
    }
    let lags: Vec<i64> = set.into_iter().collect();
    let nonneg: Vec<usize> = lags.iter().filter(|&&l| l >= 0).map(|&l| l as usize).collect();
    let aperture = *nonneg.last().unwrap() + 1;
    let present: BTreeSet<usize> = nonneg.iter().copied().collect();
    let holes: Vec<usize> = (0..aperture).filter(|l| !present.contains(l)).collect();
    let contiguous = holes.first().copied().unwrap_or(aperture);
    Ok(LagStructure {
        lags,
        nonneg,
        aperture,
        contiguous,
        holes,
    })
}

/// Correlation lag vector `v` (length = aperture); `v[0]` is real.
#[derive(Clone, Debug, PartialEq)]
pub struct LagVector(pub Vec<C64>);

impl LagVector {
    pub fn new(mut v: Vec<C64>) -> Self {
        if let Some(v0) = v.first_mut() {
            v0.im = 0.0;
        }
        Self(v)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![ZERO; n])
    }

    /// First unit vector `e_1`.
    pub fn unit(n: usize) -> Self {
        let mut v = vec![ZERO; n];
        v[0] = C64::new(1.0, 0.0);
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    /// Number of real coordinates: `2 n - 1`.
    pub fn real_dim(&self) -> usize {
        real_dim(self.0.len())
    }

    /// Real coordinates `[v0, Re v1, Im v1, Re v2, Im v2, ...]`.
    pub fn to_real(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.real_dim());
        x.push(self.0[0].re);
        for z in &self.0[1..] {
            x.push(z.re);
            x.push(z.im);
        }
        x
    }

    pub fn from_real(x: &[f64]) -> Self {
        assert!(x.len() % 2 == 1, "real coordinate vector must have odd length");
        let n = (x.len() + 1) / 2;
        let mut v = Vec::with_capacity(n);
        v.push(C64::new(x[0], 0.0));
        for k in 1..n {
            v.push(C64::new(x[2 * k - 1], x[2 * k]));
        }
        Self(v)
    }

    /// Leading `n` lags.
    pub fn truncate(&self, n: usize) -> LagVector {
        LagVector(self.0[..n].to_vec())
    }
}

pub(crate) fn real_dim(n: usize) -> usize {
    2 * n - 1
}

/// Hermitian Toeplitz matrix with first row `v`.
pub fn toeplitz_embed(v: &LagVector) -> CMatrix {
    let n = v.len();
    CMatrix::from_fn(n, n, |i, j| {
        if j >= i {
            v.0[j - i]
        } else {
            v.0[i - j].conj()
        }
    })
}

/// Structured map onto an arbitrary set of integer positions (sub-sampled Toeplitz).
pub(crate) fn structured_on(v: &LagVector, pos: &[usize]) -> CMatrix {
    let m = pos.len();
    CMatrix::from_fn(m, m, |i, j| {
        if pos[j] >= pos[i] {
            v.0[pos[j] - pos[i]]
        } else {
            v.0[pos[i] - pos[j]].conj()
        }
    })
}

/// `T(v)`: the `M x M` covariance structure of an on-grid array.
pub fn structured_matrix(v: &LagVector, g: &ArrayGeometry) -> Result<CMatrix> {
    let pos = g.grid_positions()?;
    let apt = *pos.last().unwrap() + 1;
    if v.len() != apt {
        return Err(Error::DimensionMismatch {
            expected: apt,
            got: v.len(),
        });
    }
    Ok(structured_on(v, &pos))
}

/// Adjoint of `T` on an arbitrary integer position set, so that
/// `Re tr(T(v)^H A) = Re <v, adjoint(A)>` with `v[0]` real.
pub(crate) fn adjoint_on(a: &CMatrix, pos: &[usize], aperture: usize) -> LagVector {
    let mut out = vec![ZERO; aperture];
    for (i, &pi) in pos.iter().enumerate() {
        out[0] += a[(i, i)];
        for (j, &pj) in pos.iter().enumerate().skip(i + 1) {
            out[pj - pi] += a[(i, j)] + a[(j, i)].conj();
        }
    }
    LagVector(out)
}

pub fn adjoint_structured(a: &CMatrix, g: &ArrayGeometry) -> Result<LagVector> {
    let pos = g.grid_positions()?;
    if a.rows() != pos.len() || a.cols() != pos.len() {
        return Err(Error::DimensionMismatch {
            expected: pos.len(),
            got: a.rows(),
        });
    }
    Ok(adjoint_on(a, &pos, *pos.last().unwrap() + 1))
}

/// Read `v` back out of a structured matrix. Only defined for hole-free arrays.
pub fn structured_inverse(r: &CMatrix, g: &ArrayGeometry) -> Result<LagVector> {
    let lag = coarray(g)?;
    if !lag.hole_free() {
        return invalid(format!(
            "structured inverse undefined: coarray has holes {:?}",
            lag.holes
        ));
    }
    let pos = g.grid_positions()?;
    let mut v: Vec<Option<C64>> = vec![None; lag.aperture];
    for (i, &pi) in pos.iter().enumerate() {
        for (j, &pj) in pos.iter().enumerate().skip(i) {
            let slot = &mut v[pj - pi];
            if slot.is_none() {
                *slot = Some(r[(i, j)]);
            }
        }
    }
    Ok(LagVector::new(v.into_iter().map(|z| z.unwrap()).collect()))
}

/// Sensors to add so that the union is a nested array of the same aperture.
///
/// All factorizations `(S1 + 1) S2 = N` are tried; the one needing the fewest
/// extra sensors wins, ties going to the smaller `S1`.
pub fn nested_completion(g: &ArrayGeometry) -> Result<Vec<usize>> {
    let pos = g.grid_positions()?;
    let n = *pos.last().unwrap() + 1;
    let have: BTreeSet<usize> = pos.iter().copied().collect();
    let mut best: Option<Vec<usize>> = None;
    for s1 in 1..n {
        if n % (s1 + 1) != 0 {
            continue;
        }
        let s2 = n / (s1 + 1);
        let missing: Vec<usize> = nested_positions(s1, s2)
            .into_iter()
            .filter(|p| !have.contains(p))
            .collect();
        if best.as_ref().is_none_or(|b| missing.len() < b.len()) {
            best = Some(missing);
        }
    }
    Ok(best.unwrap_or_else(|| (0..n).filter(|p| !have.contains(p)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::*;
    use crate::numerics::{herm_eig, ONE};
    use rand::Rng;
    use std::f64::consts::PI;

    fn geo(p: &[usize]) -> ArrayGeometry {
        ArrayGeometry::from_integers(p).unwrap()
    }

    fn brute_pairwise(p: &[usize]) -> BTreeSet<i64> {
        p.iter()
            .flat_map(|&a| p.iter().map(move |&b| a as i64 - b as i64))
            .collect()
    }

    #[test]
    fn coarray_examples() {
        let c = coarray(&geo(&[0, 1, 3])).unwrap();
        assert_eq!(c.lags, (-3..=3).collect::<Vec<_>>());
        assert_eq!(c.aperture, 4);
        assert!(c.holes.is_empty());

        let c = coarray(&geo(&[0, 1, 4])).unwrap();
        assert_eq!(c.holes, vec![2]);
        assert_eq!(c.aperture, 5);
        assert_eq!(c.contiguous, 2);

        let c = coarray(&geo(&[0])).unwrap();
        assert_eq!(c.lags, vec![0]);
        assert_eq!(c.aperture, 1);

        let p = [0, 1, 2, 3, 7, 11];
        let c = coarray(&geo(&p)).unwrap();
        let brute = brute_pairwise(&p);
        assert_eq!(c.lags, brute.into_iter().collect::<Vec<_>>());
        assert!(c.holes.is_empty());
        assert_eq!(c.aperture, 12);
        assert_eq!(c.contiguous, 12);
    }

    #[test]
    fn coarray_symmetric_and_odd() {
        for p in [vec![0, 1, 5, 6, 10, 11], vec![0, 2, 3], vec![0, 1, 4, 9, 11]] {
            let c = coarray(&geo(&p)).unwrap();
            assert_eq!(c.lags.len() % 2, 1);
            assert!(c.lags.contains(&0));
            for l in &c.lags {
                assert!(c.lags.contains(&-l));
            }
            let mut union: Vec<usize> = c.nonneg.clone();
            union.extend(&c.holes);
            union.sort();
            assert_eq!(union, (0..c.aperture).collect::<Vec<_>>());
        }
    }

    #[test]
    fn coarray_rejects_off_grid() {
        let g = ArrayGeometry::new(vec![0.0, 1.0, 2.1]).unwrap();
        assert_eq!(coarray(&g), Err(Error::OffGrid));
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new(vec![1.0, 2.0]).is_err());
        assert!(ArrayGeometry::new(vec![0.0, 2.0, 2.0]).is_err());
        let g = ArrayGeometry::parse("0, 1,2,3,7,11").unwrap();
        assert_eq!(g.grid_positions().unwrap(), vec![0, 1, 2, 3, 7, 11]);
        assert_eq!(g.to_string(), "0,1,2,3,7,11");
    }

    #[test]
    fn structured_matrix_entrywise() {
        let v = LagVector::new(vec![
            C64::new(4.0, 0.0),
            C64::new(1.0, 2.0),
            C64::new(3.0, -1.0),
            C64::new(-2.0, 0.5),
        ]);
        let t = structured_matrix(&v, &geo(&[0, 1, 3])).unwrap();
        let v = &v.0;
        let want = CMatrix::from_rows(&[
            vec![v[0], v[1], v[3]],
            vec![v[1].conj(), v[0], v[2]],
            vec![v[3].conj(), v[2].conj(), v[0]],
        ]);
        assert_eq!(t, want);
        assert!(structured_matrix(&LagVector::zeros(3), &geo(&[0, 1, 3])).is_err());
    }

    #[test]
    fn structured_matrix_of_unit_is_identity() {
        let g = geo(&[0, 1, 4, 9]);
        let t = structured_matrix(&LagVector::unit(10), &g).unwrap();
        assert_eq!(t, CMatrix::identity(4));
    }

    fn single_source_lags(n: usize, power: f64, u: f64) -> LagVector {
        // E[y_i y_j^*] for manifold entries exp(-j pi p u): lag k carries exp(+j pi k u).
        LagVector::new((0..n).map(|k| C64::from_polar(power, PI * k as f64 * u)).collect())
    }

    #[test]
    fn single_source_structure_is_rank_one() {
        let g = geo(&[0, 1, 4, 6]);
        let v = single_source_lags(7, 2.0, 0.37);
        let t = structured_matrix(&v, &g).unwrap();
        let phi: Vec<C64> = g
            .positions()
            .iter()
            .map(|&p| C64::from_polar(1.0, -PI * p * 0.37))
            .collect();
        let want = CMatrix::outer(&phi).scale(2.0);
        assert!((&t - &want).norm_fro() < 1e-12);
        let e = herm_eig(&t).unwrap();
        assert!(e.values[..3].iter().all(|x| x.abs() < 1e-10));

        // The mirrored sign convention is rank one as well.
        let mirrored = LagVector::new(v.0.iter().map(|z| z.conj()).collect());
        let e = herm_eig(&toeplitz_embed(&mirrored)).unwrap();
        assert!(e.values[..6].iter().all(|x| x.abs() < 1e-10));
        assert!((e.values[6] - 14.0).abs() < 1e-10);
    }

    #[test]
    fn toeplitz_examples() {
        let t = toeplitz_embed(&LagVector::new(vec![ONE, ZERO, ZERO]));
        assert_eq!(t, CMatrix::identity(3));
        let t = toeplitz_embed(&LagVector::new(vec![C64::new(2.0, 0.0), ONE, ZERO]));
        let e = herm_eig(&t).unwrap();
        let want = [2.0 - 2f64.sqrt(), 2.0, 2.0 + 2f64.sqrt()];
        for (x, y) in e.values.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn structured_is_principal_submatrix_of_toeplitz() {
        let mut r = rng(21);
        let g = geo(&[0, 1, 2, 3, 7, 11]);
        let pos = g.grid_positions().unwrap();
        for _ in 0..20 {
            let v = LagVector::new(
                (0..12)
                    .map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
                    .collect(),
            );
            let full = toeplitz_embed(&v);
            assert_eq!(structured_matrix(&v, &g).unwrap(), full.select(&pos, &pos));
        }
    }

    #[test]
    fn psd_toeplitz_gives_psd_structure() {
        let mut r = rng(22);
        let g = geo(&[0, 1, 5, 6, 10, 11]);
        for _ in 0..20 {
            // Random PSD Toeplitz from a handful of sources.
            let mut v = vec![ZERO; 12];
            for _ in 0..3 {
                let u: f64 = r.gen_range(-1.0..1.0);
                let p: f64 = r.gen_range(0.1..2.0);
                for (k, z) in v.iter_mut().enumerate() {
                    *z += C64::from_polar(p, PI * k as f64 * u);
                }
            }
            let v = LagVector::new(v);
            assert!(herm_eig(&toeplitz_embed(&v)).unwrap().min() > -1e-10);
            assert!(herm_eig(&structured_matrix(&v, &g).unwrap()).unwrap().min() > -1e-10);
        }
    }

    #[test]
    fn adjoint_examples() {
        let a = adjoint_structured(&CMatrix::identity(3), &ArrayGeometry::ula(3)).unwrap();
        assert_eq!(a.0, vec![C64::new(3.0, 0.0), ZERO, ZERO]);
        let mut r = rng(2);
        let g = geo(&[0, 1, 4]);
        for _ in 0..10 {
            let a = random_matrix(&mut r, 3, 3);
            assert_eq!(adjoint_structured(&a, &g).unwrap().0[2], ZERO);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut r = rng(99);
        for p in [vec![0, 1, 2, 3], vec![0, 1, 2, 3, 7, 11], vec![0, 1, 5, 6, 10, 11], vec![0, 1, 4]] {
            let g = geo(&p);
            let n = *p.last().unwrap() + 1;
            for _ in 0..100 {
                let a = random_matrix(&mut r, p.len(), p.len());
                let v = LagVector::new(
                    (0..n)
                        .map(|_| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
                        .collect(),
                );
                let t = structured_matrix(&v, &g).unwrap();
                let lhs = t.adjoint().trace_product(&a).re;
                let adj = adjoint_structured(&a, &g).unwrap();
                let rhs: f64 = v.0.iter().zip(&adj.0).map(|(x, y)| (x.conj() * y).re).sum();
                assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }

    #[test]
    fn structured_inverse_round_trip() {
        let g = geo(&[0, 1, 3]);
        let v = LagVector::new(vec![
            C64::new(1.0, 0.0),
            C64::new(0.2, 0.1),
            C64::new(-0.3, 0.4),
            C64::new(0.5, -0.5),
        ]);
        let t = structured_matrix(&v, &g).unwrap();
        assert_eq!(structured_inverse(&t, &g).unwrap(), v);
        let g = geo(&[0, 1, 4]);
        assert!(structured_inverse(&CMatrix::identity(3), &g).is_err());
    }

    fn brute_completion(p: &[usize]) -> Vec<usize> {
        let n = *p.last().unwrap() + 1;
        let mut best: Option<(usize, Vec<usize>)> = None;
        for s1 in 1..n {
            for s2 in 1..=n {
                if (s1 + 1) * s2 != n {
                    continue;
                }
                let nes: BTreeSet<usize> = (0..s1).chain((1..=s2).map(|k| k * (s1 + 1) - 1)).collect();
                let miss: Vec<usize> = nes.difference(&p.iter().copied().collect()).copied().collect();
                if best.as_ref().is_none_or(|(_, b)| miss.len() < b.len()) {
                    best = Some((s1, miss));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn nested_completion_examples() {
        assert!(nested_completion(&ArrayGeometry::ula(8)).unwrap().is_empty());

        let p = [0, 1, 2, 3, 7, 11];
        let m = nested_completion(&geo(&p)).unwrap();
        assert_eq!(m, brute_completion(&p));
        assert!(m.is_empty());

        let p = [0, 1, 5, 6, 10, 11];
        let m = nested_completion(&geo(&p)).unwrap();
        assert_eq!(m, brute_completion(&p));
        assert_eq!(m, vec![2, 8]);
        let mut full: Vec<usize> = p.to_vec();
        full.extend(&m);
        full.sort();
        let c = coarray(&geo(&full)).unwrap();
        for h in [2, 3, 7, 8] {
            assert!(c.nonneg.contains(&h));
        }
        assert!(c.hole_free());
    }

    #[test]
    fn real_coordinates_round_trip() {
        let v = LagVector::new(vec![C64::new(2.0, 0.0), C64::new(0.5, -0.25), C64::new(1.0, 3.0)]);
        let x = v.to_real();
        assert_eq!(x, vec![2.0, 0.5, -0.25, 1.0, 3.0]);
        assert_eq!(LagVector::from_real(&x), v);
    }
}
