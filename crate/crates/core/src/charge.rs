//! Charge lattice, the twisted torus algebra and Kontsevich-Soibelman
//! transformations, with numerical wall-crossing identity checks.
//!
//! Charges are integer vectors `(q~_1..q~_m, q^1..q^m)`, magnetic block first.
//! The canonical pairing is `<g, g'> = g^T eps g'` with
//! `eps = [[0, -1], [1, 0]]` in `m x m` blocks, so `<gamma^A, gamma~_B> = delta`.
//!
//! Ordering convention: `ks_ordered_product` applies the factors to a torus
//! point in order of decreasing `Arg Z` inside the half-plane
//! `(alpha - pi, alpha]`. With `<g1, g2> = 1` this makes
//! `T_{g1}` then `T_{g2}` equal to `T_{g2}`, `T_{g1+g2}`, `T_{g1}` (in that
//! order), the pentagon identity; the reverse assignment fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::rogers_l_with_log;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Charge(pub Vec<i64>);

impl Charge {
    pub fn new(q: Vec<i64>) -> Self {
        Self(q)
    }

    pub fn zero(rank: usize) -> Self {
        Self(vec![0; rank])
    }

    pub fn basis(rank: usize, a: usize) -> Self {
        let mut q = vec![0; rank];
        q[a] = 1;
        Self(q)
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0)
    }

    pub fn magnetic(&self) -> &[i64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn electric(&self) -> &[i64] {
        &self.0[self.0.len() / 2..]
    }

    /// Greatest common divisor of the entries.
    pub fn content(&self) -> i64 {
        self.0.iter().fold(0, |g, &x| gcd(g, x.abs()))
    }

    pub fn primitive(&self) -> Charge {
        let g = self.content().max(1);
        Charge(self.0.iter().map(|x| x / g).collect())
    }

    /// True if both charges are multiples of one primitive charge.
    pub fn is_proportional(&self, other: &Charge) -> bool {
        if self.is_zero() || other.is_zero() {
            return true;
        }
        let a = self.primitive();
        let b = other.primitive();
        a == b || a == -b
    }

    pub fn norm(&self) -> f64 {
        (self.0.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt()
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Add for &Charge {
    type Output = Charge;
    fn add(self, o: &Charge) -> Charge {
        Charge(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &Charge {
    type Output = Charge;
    fn sub(self, o: &Charge) -> Charge {
        Charge(self.0.iter().zip(&o.0).map(|(a, b)| a - b).collect())
    }
}

impl Neg for Charge {
    type Output = Charge;
    fn neg(self) -> Charge {
        Charge(self.0.into_iter().map(|a| -a).collect())
    }
}

impl Neg for &Charge {
    type Output = Charge;
    fn neg(self) -> Charge {
        -(self.clone())
    }
}

impl Mul<i64> for &Charge {
    type Output = Charge;
    fn mul(self, k: i64) -> Charge {
        Charge(self.0.iter().map(|a| a * k).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymplecticLattice {
    pub rank: usize,
    /// `eps^{ab} = <gamma^a, gamma^b>`.
    pub pairing_matrix: Vec<Vec<i64>>,
}

impl SymplecticLattice {
    /// Canonical frame of rank `2m`.
    pub fn canonical(m: usize) -> Self {
        let rank = 2 * m;
        let mut e = vec![vec![0; rank]; rank];
        for a in 0..m {
            e[a][m + a] = -1;
            e[m + a][a] = 1;
        }
        Self { rank, pairing_matrix: e }
    }

    pub fn from_matrix(pairing_matrix: Vec<Vec<i64>>) -> Result<Self> {
        let rank = pairing_matrix.len();
        if rank == 0 || rank % 2 != 0 {
            return Err(Error::InvalidLattice(format!("rank must be even and positive, got {rank}")));
        }
        for (i, row) in pairing_matrix.iter().enumerate() {
            if row.len() != rank {
                return Err(Error::InvalidLattice(format!("row {i} has length {}", row.len())));
            }
            for j in 0..rank {
                if pairing_matrix[i][j] != -pairing_matrix[j][i] {
                    return Err(Error::InvalidLattice(format!("not antisymmetric at ({i},{j})")));
                }
            }
        }
        let m = DMatrix::from_fn(rank, rank, |i, j| pairing_matrix[i][j] as f64);
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidLattice(format!("determinant {det} != 1")));
        }
        Ok(Self { rank, pairing_matrix })
    }

    pub fn m(&self) -> usize {
        self.rank / 2
    }

    fn check(&self, g: &Charge) -> Result<()> {
        if g.rank() != self.rank {
            return Err(Error::RankMismatch { expected: self.rank, found: g.rank() });
        }
        Ok(())
    }

    pub fn pairing(&self, g1: &Charge, g2: &Charge) -> Result<i64> {
        self.check(g1)?;
        self.check(g2)?;
        let mut s = 0;
        for (a, row) in self.pairing_matrix.iter().enumerate() {
            if g1.0[a] == 0 {
                continue;
            }
            for (b, e) in row.iter().enumerate() {
                s += g1.0[a] * e * g2.0[b];
            }
        }
        Ok(s)
    }

    /// `<g, gamma^a>` for every basis charge.
    pub fn pairing_with_basis(&self, g: &Charge) -> Result<Vec<i64>> {
        self.check(g)?;
        Ok((0..self.rank)
            .map(|a| (0..self.rank).map(|b| g.0[b] * self.pairing_matrix[b][a]).sum())
            .collect())
    }

    pub fn eps_upper(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rank, self.rank, |i, j| self.pairing_matrix[i][j] as f64)
    }

    /// `eps_{ab}`, the inverse of `eps^{ab}`.
    pub fn eps_lower(&self) -> DMatrix<f64> {
        self.eps_upper().try_inverse().expect("unimodular pairing")
    }
}

/// Quadratic refinement `(-1)^{q~ . q}` in the canonical frame.
pub fn sigma(g: &Charge) -> i32 {
    let s: i64 = g.magnetic().iter().zip(g.electric()).map(|(a, b)| a * b).sum();
    if s.rem_euclid(2) == 0 {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub basis_values: Vec<C>,
}

impl TorusPoint {
    pub fn new(basis_values: Vec<C>) -> Result<Self> {
        if basis_values.iter().any(|x| x.norm() == 0.0 || !x.is_finite()) {
            return Err(Error::Domain("torus point entries must be finite and nonzero".into()));
        }
        Ok(Self { basis_values })
    }

    pub fn rank(&self) -> usize {
        self.basis_values.len()
    }
}

/// `X_gamma = sigma_gamma prod_a X_a^{q_a}`.
pub fn x_eval(pt: &TorusPoint, g: &Charge) -> C {
    let mut x = C::new(sigma(g) as f64, 0.0);
    for (v, &q) in pt.basis_values.iter().zip(&g.0) {
        if q != 0 {
            x *= v.powi(q as i32);
        }
    }
    x
}

/// `T_{g'}`: `X_a -> X_a (1 - X_{g'})^{<g', gamma^a>}`.
pub fn ks_transform(lat: &SymplecticLattice, g_prime: &Charge, pt: &TorusPoint) -> Result<TorusPoint> {
    ks_transform_pow(lat, g_prime, pt, 1)
}

/// `T_{g'}^k`; negative `k` gives the inverse transformation.
pub fn ks_transform_pow(
    lat: &SymplecticLattice,
    g_prime: &Charge,
    pt: &TorusPoint,
    k: i64,
) -> Result<TorusPoint> {
    if pt.rank() != lat.rank {
        return Err(Error::RankMismatch { expected: lat.rank, found: pt.rank() });
    }
    let p = lat.pairing_with_basis(g_prime)?;
    let xg = x_eval(pt, g_prime);
    let one_minus = C::new(1.0, 0.0) - xg;
    if one_minus.norm() < 1e-14 {
        return Err(Error::SingularTransform(g_prime.0.clone()));
    }
    let basis_values = pt
        .basis_values
        .iter()
        .zip(&p)
        .map(|(&x, &e)| if e == 0 { x } else { x * one_minus.powi((e * k) as i32) })
        .collect();
    Ok(TorusPoint { basis_values })
}

/// Central charges, BPS degeneracies and an overall scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityData {
    /// `Z_{gamma^a}` before scaling.
    pub central_charge: Vec<C>,
    pub spectrum: BTreeMap<Charge, u32>,
    pub scale: f64,
}

impl StabilityData {
    pub fn new(central_charge: Vec<C>, spectrum: BTreeMap<Charge, u32>, scale: f64) -> Result<Self> {
        let s = Self { central_charge, spectrum, scale };
        s.validate()?;
        Ok(s)
    }

    /// Builds the data after adding `-gamma` for every stored `gamma`.
    pub fn with_cpt_closure(
        central_charge: Vec<C>,
        spectrum: impl IntoIterator<Item = (Charge, u32)>,
        scale: f64,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (g, o) in spectrum {
            map.insert(-&g, o);
            map.insert(g, o);
        }
        Self::new(central_charge, map, scale)
    }

    pub fn rank(&self) -> usize {
        self.central_charge.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidStability(format!("scale must be positive, got {}", self.scale)));
        }
        for (g, &o) in &self.spectrum {
            if g.rank() != self.rank() {
                return Err(Error::RankMismatch { expected: self.rank(), found: g.rank() });
            }
            if g.is_zero() || o == 0 {
                return Err(Error::InvalidStability(format!("bad spectrum entry {:?}: {o}", g.0)));
            }
            if self.spectrum.get(&-g) != Some(&o) {
                return Err(Error::InvalidStability(format!("CPT closure fails for {:?}", g.0)));
            }
            if self.z(g).norm() / g.norm() < 1e-12 {
                return Err(Error::InvalidStability(format!("support property fails for {:?}", g.0)));
            }
        }
        Ok(())
    }

    /// Scaled central charge `Z_gamma`.
    pub fn z(&self, g: &Charge) -> C {
        self.scale
            * g.0
                .iter()
                .zip(&self.central_charge)
                .map(|(&q, z)| z * q as f64)
                .sum::<C>()
    }

    pub fn support(&self) -> impl Iterator<Item = (&Charge, u32)> {
        self.spectrum.iter().map(|(g, &o)| (g, o))
    }

    /// A pair of non-proportional support charges with aligned central
    /// charges, if any.
    pub fn wall_pair(&self, angle_tol: f64) -> Option<(Charge, Charge)> {
        let charges: Vec<&Charge> = self.spectrum.keys().collect();
        for (i, a) in charges.iter().enumerate() {
            for b in &charges[i + 1..] {
                if a.is_proportional(b) {
                    continue;
                }
                let r = self.z(b) / self.z(a);
                if r.re > 0.0 && r.arg().abs() < angle_tol {
                    return Some(((*a).clone(), (*b).clone()));
                }
            }
        }
        None
    }

    pub fn spectrum_to_json(&self) -> String {
        let items: Vec<SpectrumEntry> = self
            .spectrum
            .iter()
            .map(|(g, &o)| SpectrumEntry { charge: g.0.clone(), omega: o })
            .collect();
        serde_json::to_string(&items).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub charge: Vec<i64>,
    pub omega: u32,
}

/// Parses `[{"charge": [..], "omega": n}, ...]`.
pub fn spectrum_from_json(s: &str) -> Result<BTreeMap<Charge, u32>> {
    let items: Vec<SpectrumEntry> =
        serde_json::from_str(s).map_err(|e| Error::Config(format!("spectrum: {e}")))?;
    Ok(items.into_iter().map(|e| (Charge(e.charge), e.omega)).collect())
}

/// `Arg` shifted into `(alpha - 2 pi, alpha]`.
fn arg_below(z: C, alpha: f64) -> f64 {
    let mut t = z.arg();
    while t > alpha {
        t -= 2.0 * PI;
    }
    while t <= alpha - 2.0 * PI {
        t += 2.0 * PI;
    }
    t
}

/// Support charges with `Arg Z` in `(alpha - pi, alpha]`, sorted by
/// decreasing argument (clockwise order of the rays).
pub fn ordered_factors(stab: &StabilityData, alpha: f64) -> Vec<(Charge, u32)> {
    let mut v: Vec<(f64, Charge, u32)> = stab
        .support()
        .filter_map(|(g, o)| {
            let t = arg_below(stab.z(g), alpha);
            (t > alpha - PI).then(|| (t, g.clone(), o))
        })
        .collect();
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    v.into_iter().map(|(_, g, o)| (g, o)).collect()
}

/// Composition of `T_gamma^{Omega(gamma)}` over the half-plane, in clockwise order.
pub fn ks_ordered_product(
    lat: &SymplecticLattice,
    stab: &StabilityData,
    half_plane_angle: f64,
    pt: &TorusPoint,
) -> Result<TorusPoint> {
    let mut cur = pt.clone();
    for (g, o) in ordered_factors(stab, half_plane_angle) {
        cur = ks_transform_pow(lat, &g, &cur, o as i64)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WcResiduals {
    pub product: f64,
    pub log: f64,
    pub dilog: f64,
}

struct RunningSums {
    end: TorusPoint,
    log: Vec<C>,
    rogers: C,
}

fn running_sums(lat: &SymplecticLattice, factors: &[(Charge, u32)], pt: &TorusPoint) -> Result<RunningSums> {
    let mut cur = pt.clone();
    // logarithms of the basis values, continued along the sequence
    let mut logs: Vec<C> = pt.basis_values.iter().map(|x| x.ln()).collect();
    let mut log = vec![C::new(0.0, 0.0); lat.rank];
    let mut rogers = C::new(0.0, 0.0);
    for (g, o) in factors {
        let x = x_eval(&cur, g);
        let l = (C::new(1.0, 0.0) - x).ln();
        for (acc, &q) in log.iter_mut().zip(&g.0) {
            *acc += l * (q * *o as i64) as f64;
        }
        let lx: C = g.0.iter().zip(&logs).map(|(&q, v)| v * q as f64).sum();
        rogers += rogers_l_with_log(x, lx)? * *o as f64;
        let p = lat.pairing_with_basis(g)?;
        for (v, &e) in logs.iter_mut().zip(&p) {
            *v += l * (e * *o as i64) as f64;
        }
        cur = ks_transform_pow(lat, g, &cur, *o as i64)?;
    }
    Ok(RunningSums { end: cur, log, rogers })
}

/// Product, logarithmic and dilogarithmic wall-crossing residuals.
///
/// The dilogarithm residual is the variance of the difference of Rogers sums
/// over `pt` and eight nearby points, since the identity holds only up to an
/// additive constant. Logarithms are continued along each sequence rather
/// than taken on the principal branch.
pub fn wc_identity_residuals(
    lat: &SymplecticLattice,
    stab_left: &StabilityData,
    stab_right: &StabilityData,
    half_plane_angle: f64,
    pt: &TorusPoint,
) -> Result<WcResiduals> {
    let fl = ordered_factors(stab_left, half_plane_angle);
    let fr = ordered_factors(stab_right, half_plane_angle);
    let l = running_sums(lat, &fl, pt)?;
    let r = running_sums(lat, &fr, pt)?;
    let product = l
        .end
        .basis_values
        .iter()
        .zip(&r.end.basis_values)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let log = l.log.iter().zip(&r.log).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);

    let mut diffs = vec![l.rogers - r.rogers];
    for k in 0..8 {
        let ph = C::from_polar(1.0, 2.0 * PI * k as f64 / 8.0);
        let vals = pt
            .basis_values
            .iter()
            .enumerate()
            .map(|(a, x)| x * (1.0 + 0.02 * ph * C::from_polar(1.0, a as f64)))
            .collect();
        let p = TorusPoint::new(vals)?;
        let lp = running_sums(lat, &fl, &p)?;
        let rp = running_sums(lat, &fr, &p)?;
        diffs.push(lp.rogers - rp.rogers);
    }
    let n = diffs.len() as f64;
    let mean: C = diffs.iter().sum::<C>() / n;
    let dilog = diffs.iter().map(|d| (d - mean).norm_sqr()).sum::<f64>() / n;
    Ok(WcResiduals { product, log, dilog })
}

/// Pentagon pair for `<g1, g2> = 1` in rank 2: `g1 = (0,1)`, `g2 = (1,0)`.
///
/// Returns `(two_state, three_state)` spectra with the supplied central
/// charges; the caller is responsible for placing `Z` on the correct side.
pub fn pentagon_spectra() -> (Vec<(Charge, u32)>, Vec<(Charge, u32)>) {
    let g1 = Charge(vec![0, 1]);
    let g2 = Charge(vec![1, 0]);
    let g12 = &g1 + &g2;
    (vec![(g1.clone(), 1), (g2.clone(), 1)], vec![(g1, 1), (g2, 1), (g12, 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::rogers_l;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, rank: usize, rmax: f64) -> TorusPoint {
        TorusPoint::new(
            (0..rank)
                .map(|_| C::from_polar(rng.gen_range(0.05..rmax), rng.gen_range(-PI..PI)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pairing_examples() {
        let lat = SymplecticLattice::canonical(1);
        let e = Charge(vec![0, 1]);
        let m = Charge(vec![1, 0]);
        assert_eq!(lat.pairing(&e, &m).unwrap(), 1);
        assert_eq!(lat.pairing(&m, &m).unwrap(), 0);
        assert!(lat.pairing(&e, &Charge(vec![1, 0, 0, 0])).is_err());
        assert!(SymplecticLattice::from_matrix(vec![vec![0, 2], vec![-2, 0]]).is_err());
        assert!(SymplecticLattice::from_matrix(vec![vec![0, 1], vec![1, 0]]).is_err());
        assert_eq!(SymplecticLattice::from_matrix(lat.pairing_matrix.clone()).unwrap(), lat);
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma(&Charge::zero(2)), 1);
        assert_eq!(sigma(&Charge(vec![0, 5])), 1);
        assert_eq!(sigma(&Charge(vec![1, 1])), -1);
    }

    #[test]
    fn cocycle_exhaustive_rank2() {
        let lat = SymplecticLattice::canonical(1);
        let r = -3..=3i64;
        for a in r.clone() {
            for b in r.clone() {
                for c in r.clone() {
                    for d in r.clone() {
                        let g = Charge(vec![a, b]);
                        let h = Charge(vec![c, d]);
                        let p = lat.pairing(&g, &h).unwrap();
                        let sign = if p.rem_euclid(2) == 0 { 1 } else { -1 };
                        assert_eq!(sigma(&g) * sigma(&h) * sign, sigma(&(&g + &h)));
                    }
                }
            }
        }
    }

    #[test]
    fn x_eval_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = SymplecticLattice::canonical(1);
        let pt = random_point(&mut rng, 2, 2.0);
        assert_eq!(x_eval(&pt, &Charge::zero(2)), C::new(1.0, 0.0));
        assert_eq!(x_eval(&pt, &Charge::basis(2, 1)), pt.basis_values[1]);
        for _ in 0..50 {
            let g = Charge(vec![rng.gen_range(-3..4), rng.gen_range(-3..4)]);
            let h = Charge(vec![rng.gen_range(-3..4), rng.gen_range(-3..4)]);
            let ratio = x_eval(&pt, &g) * x_eval(&pt, &h) / x_eval(&pt, &(&g + &h));
            let p = lat.pairing(&g, &h).unwrap();
            let expect = if p.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            assert!((ratio - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn ks_transform_example() {
        let lat = SymplecticLattice::canonical(1);
        let g1 = Charge(vec![0, 1]);
        let g2 = Charge(vec![1, 0]);
        assert_eq!(lat.pairing(&g2, &g1).unwrap(), -1);
        // X_{g1} = 0.5, X_{g2} = 0.25 (basis order: magnetic, electric)
        let pt = TorusPoint::new(vec![C::new(0.25, 0.0), C::new(0.5, 0.0)]).unwrap();
        let out = ks_transform(&lat, &g2, &pt).unwrap();
        assert!((out.basis_values[1] - 2.0 / 3.0).norm() < 1e-15);
        let same = ks_transform(&lat, &Charge(vec![0, 2]), &TorusPoint {
            basis_values: vec![C::new(1.0, 0.0), C::new(0.3, 0.1)],
        })
        .unwrap();
        assert!((same.basis_values[1] - C::new(0.3, 0.1)).norm() < 1e-15);
        let singular = TorusPoint::new(vec![C::new(1.0, 0.0), C::new(0.3, 0.0)]).unwrap();
        assert!(matches!(ks_transform(&lat, &g2, &singular), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn ks_commutes_with_x_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = SymplecticLattice::canonical(1);
        for _ in 0..20 {
            let pt = random_point(&mut rng, 2, 0.8);
            let gp = Charge(vec![rng.gen_range(-2..3), rng.gen_range(-2..3)]);
            let g = Charge(vec![rng.gen_range(-2..3), rng.gen_range(-2..3)]);
            if gp.is_zero() {
                continue;
            }
            let out = ks_transform(&lat, &gp, &pt).unwrap();
            let p = lat.pairing(&gp, &g).unwrap();
            let expect = x_eval(&pt, &g) * (C::new(1.0, 0.0) - x_eval(&pt, &gp)).powi(p as i32);
            assert!((x_eval(&out, &g) - expect).norm() < 1e-10 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn inverse_returns_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lat = SymplecticLattice::canonical(2);
        for _ in 0..30 {
            let pt = random_point(&mut rng, 4, 0.9);
            let gp = Charge((0..4).map(|_| rng.gen_range(-2..3)).collect());
            if gp.is_zero() {
                continue;
            }
            let fwd = ks_transform(&lat, &gp, &pt).unwrap();
            let back = ks_transform_pow(&lat, &gp, &fwd, -1).unwrap();
            for (a, b) in back.basis_values.iter().zip(&pt.basis_values) {
                assert!((a - b).norm() < 1e-12 * b.norm().max(1.0));
            }
        }
    }

    fn ln_map(lat: &SymplecticLattice, gp: &Charge, l: &[C]) -> Vec<C> {
        let s = sigma(gp) as f64;
        let x = s * gp.0.iter().zip(l).map(|(&q, v)| v * q as f64).sum::<C>().exp();
        let p = lat.pairing_with_basis(gp).unwrap();
        let lg = (C::new(1.0, 0.0) - x).ln();
        l.iter().zip(&p).map(|(v, &e)| v + lg * e as f64).collect()
    }

    #[test]
    fn symplectomorphism_in_log_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in [1usize, 2] {
            let lat = SymplecticLattice::canonical(m);
            let n = 2 * m;
            let eps = lat.eps_lower();
            for _ in 0..20 {
                let l: Vec<C> = (0..n)
                    .map(|_| C::new(rng.gen_range(-2.5..-0.3), rng.gen_range(-3.0..3.0)))
                    .collect();
                let gp = Charge((0..n).map(|_| rng.gen_range(-2..3)).collect());
                if gp.is_zero() {
                    continue;
                }
                let h = 1e-6;
                let mut jac = DMatrix::<C>::zeros(n, n);
                for b in 0..n {
                    let mut lp = l.clone();
                    let mut lm = l.clone();
                    lp[b] += h;
                    lm[b] -= h;
                    let fp = ln_map(&lat, &gp, &lp);
                    let fm = ln_map(&lat, &gp, &lm);
                    for a in 0..n {
                        jac[(a, b)] = (fp[a] - fm[a]) / (2.0 * h);
                    }
                }
                let e = eps.map(|x| C::new(x, 0.0));
                let res = (jac.transpose() * &e * &jac - &e).iter().map(|x| x.norm()).fold(0.0, f64::max);
                assert!(res < 1e-8, "residual {res}");
            }
        }
    }

    #[test]
    fn one_form_potential_shift() {
        // 1/2 eps_ab ln X_a dln X_b picks up -dL_sigma(X_g') under T_g'
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lat = SymplecticLattice::canonical(1);
        let eps = lat.eps_lower();
        let theta = |l: &[C], dl: &[C]| -> C {
            let mut s = C::new(0.0, 0.0);
            for a in 0..2 {
                for b in 0..2 {
                    s += 0.5 * eps[(a, b)] * l[a] * dl[b];
                }
            }
            s
        };
        for gp in [Charge(vec![0, 1]), Charge(vec![1, 1]), Charge(vec![1, 0]), Charge(vec![2, 1])] {
            let sg = sigma(&gp);
            let xg = |l: &[C]| -> C {
                sg as f64 * gp.0.iter().zip(l).map(|(&q, v)| v * q as f64).sum::<C>().exp()
            };
            for _ in 0..20 {
                let l: Vec<C> = (0..2)
                    // Im(g.l) stays on the principal strip
                    .map(|_| C::new(rng.gen_range(0.1f64..0.6).ln(), rng.gen_range(-1.0..1.0)))
                    .collect();
                let v: Vec<C> = (0..2)
                    .map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                let h = 1e-6;
                let shift = |s: f64| -> Vec<C> { l.iter().zip(&v).map(|(a, b)| a + b * s).collect() };
                let (lp, lm) = (shift(h), shift(-h));
                let image = ln_map(&lat, &gp, &l);
                let fp = ln_map(&lat, &gp, &lp);
                let fm = ln_map(&lat, &gp, &lm);
                let dimage: Vec<C> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                let lhs = theta(&image, &dimage);
                let dl = (rogers_l(sg, xg(&lp)).unwrap() - rogers_l(sg, xg(&lm)).unwrap()) / (2.0 * h);
                let rhs = theta(&l, &v) - dl;
                assert!((lhs - rhs).norm() < 1e-7, "{:?}: {}", gp.0, (lhs - rhs).norm());
            }
        }
    }

    fn pentagon_stab(two_state: bool) -> StabilityData {
        let (a, b) = pentagon_spectra();
        // Z_{g1} = e^{0.3i}, Z_{g2} = e^{-0.3i} puts Arg Z_{g1} > Arg Z_{g2}
        let (zm, ze) = if two_state {
            (C::from_polar(1.0, -0.3), C::from_polar(1.0, 0.3))
        } else {
            (C::from_polar(1.0, 0.3), C::from_polar(1.0, -0.3))
        };
        let spec = if two_state { a } else { b };
        StabilityData::with_cpt_closure(vec![zm, ze], spec, 1.0).unwrap()
    }

    #[test]
    fn pentagon_ordering_convention() {
        // regression pin: T_{g1} then T_{g2} equals T_{g2}, T_{g1+g2}, T_{g1}
        let lat = SymplecticLattice::canonical(1);
        let g1 = Charge(vec![0, 1]);
        let g2 = Charge(vec![1, 0]);
        let g12 = &g1 + &g2;
        assert_eq!(lat.pairing(&g1, &g2).unwrap(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let seq = |s: &[&Charge], p: &TorusPoint| {
            s.iter().try_fold(p.clone(), |acc, g| ks_transform(&lat, g, &acc)).unwrap()
        };
        let mut worst_rev: f64 = 0.0;
        for _ in 0..50 {
            let p = random_point(&mut rng, 2, 0.5);
            let a = seq(&[&g1, &g2], &p);
            let b = seq(&[&g2, &g12, &g1], &p);
            let c = seq(&[&g2, &g1], &p);
            let d = seq(&[&g1, &g12, &g2], &p);
            for i in 0..2 {
                assert!((a.basis_values[i] - b.basis_values[i]).norm() < 1e-12);
                worst_rev = worst_rev.max((c.basis_values[i] - d.basis_values[i]).norm());
            }
        }
        assert!(worst_rev > 1e-3);
    }

    #[test]
    fn pentagon_residuals() {
        let lat = SymplecticLattice::canonical(1);
        let left = pentagon_stab(true);
        let right = pentagon_stab(false);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let p = random_point(&mut rng, 2, 0.6);
            let r = wc_identity_residuals(&lat, &left, &right, PI / 2.0, &p).unwrap();
            assert!(r.product < 1e-12, "{r:?}");
            assert!(r.log < 1e-10, "{r:?}");
            assert!(r.dilog < 1e-16, "{r:?}");
        }
        let p = random_point(&mut rng, 2, 0.6);
        let same = wc_identity_residuals(&lat, &left, &left, PI / 2.0, &p).unwrap();
        assert_eq!(same, WcResiduals { product: 0.0, log: 0.0, dilog: 0.0 });
    }

    #[test]
    fn ordered_product_basics() {
        let lat = SymplecticLattice::canonical(1);
        let pt = TorusPoint::new(vec![C::new(0.3, 0.1), C::new(-0.2, 0.4)]).unwrap();
        let empty = StabilityData::new(vec![C::new(1.0, 0.0), C::new(0.0, 1.0)], BTreeMap::new(), 1.0).unwrap();
        assert_eq!(ks_ordered_product(&lat, &empty, 0.5, &pt).unwrap(), pt);
        let g = Charge(vec![1, 0]);
        let single = StabilityData::with_cpt_closure(
            vec![C::new(1.0, 0.2), C::new(0.0, 1.0)],
            [(g.clone(), 3)],
            1.0,
        )
        .unwrap();
        let out = ks_ordered_product(&lat, &single, PI / 2.0, &pt).unwrap();
        let mut it = pt.clone();
        for _ in 0..3 {
            it = ks_transform(&lat, &g, &it).unwrap();
        }
        assert!((out.basis_values[1] - it.basis_values[1]).norm() < 1e-14);
    }

    #[test]
    fn stability_validation() {
        let z = vec![C::new(1.0, 0.0), C::new(0.0, 1.0)];
        let mut m = BTreeMap::new();
        m.insert(Charge(vec![1, 0]), 1);
        assert!(StabilityData::new(z.clone(), m.clone(), 1.0).is_err());
        m.insert(Charge(vec![-1, 0]), 1);
        assert!(StabilityData::new(z.clone(), m.clone(), 1.0).is_ok());
        assert!(StabilityData::new(z.clone(), m.clone(), -1.0).is_err());
        let wall = StabilityData::with_cpt_closure(
            vec![C::new(1.0, 0.0), C::new(2.0, 0.0)],
            [(Charge(vec![1, 0]), 1), (Charge(vec![0, 1]), 1)],
            1.0,
        )
        .unwrap();
        assert!(wall.wall_pair(1e-12).is_some());
        let json = wall.spectrum_to_json();
        assert_eq!(spectrum_from_json(&json).unwrap(), wall.spectrum);
    }

    proptest::proptest! {
        #[test]
        fn pairing_bilinear_antisymmetric(
            a in proptest::collection::vec(-5i64..6, 4),
            b in proptest::collection::vec(-5i64..6, 4),
            c in proptest::collection::vec(-5i64..6, 4),
        ) {
            let lat = SymplecticLattice::canonical(2);
            let (a, b, c) = (Charge(a), Charge(b), Charge(c));
            proptest::prop_assert_eq!(lat.pairing(&a, &a).unwrap(), 0);
            proptest::prop_assert_eq!(lat.pairing(&a, &b).unwrap(), -lat.pairing(&b, &a).unwrap());
            proptest::prop_assert_eq!(
                lat.pairing(&(&a + &b), &c).unwrap(),
                lat.pairing(&a, &c).unwrap() + lat.pairing(&b, &c).unwrap()
            );
        }

        #[test]
        fn cocycle_rank4(
            a in proptest::collection::vec(-3i64..4, 4),
            b in proptest::collection::vec(-3i64..4, 4),
        ) {
            let lat = SymplecticLattice::canonical(2);
            let (a, b) = (Charge(a), Charge(b));
            let p = lat.pairing(&a, &b).unwrap();
            let sign = if p.rem_euclid(2) == 0 { 1 } else { -1 };
            proptest::prop_assert_eq!(sigma(&a) * sigma(&b) * sign, sigma(&(&a + &b)));
        }
    }
}
