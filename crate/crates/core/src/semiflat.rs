//! Semi-flat hyperkahler metrics from a holomorphic prepotential: frames,
//! the rotational action with its potentials, and the hyper (1,1) forms.
//!
//! Lattice basis order follows `charge`: index `A < m` is the magnetic
//! charge with `Z = F_A` and angle `psi~_A`, index `m + A` the electric one
//! with `Z = z^A` and angle `psi^A`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dpsi, dpsi_tilde, dz, dzbar, exterior_d_1form, gradient, interior, semiflat_forms, wedge, Covector,
    FiberPoint, FormMatrix, FrameData,
};

const I: C = C::new(0.0, 1.0);
const ZERO: C = C::new(0.0, 0.0);

/// `F` and its first three derivatives at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepotentialValues {
    pub f: C,
    pub fa: DVector<C>,
    pub fab: DMatrix<C>,
    /// `fabc[c][(a, b)] = F_abc`.
    pub fabc: Vec<DMatrix<C>>,
}

/// Region where a prepotential is evaluated; applied to every `z^A`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegularDomain {
    #[serde(default)]
    pub min_abs: Option<f64>,
    #[serde(default)]
    pub max_abs: Option<f64>,
    #[serde(default)]
    pub min_im: Option<f64>,
}

impl RegularDomain {
    pub fn contains(&self, z: &[C]) -> bool {
        z.iter().all(|w| {
            self.min_abs.is_none_or(|r| w.norm() > r)
                && self.max_abs.is_none_or(|r| w.norm() < r)
                && self.min_im.is_none_or(|y| w.im > y)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrepotentialKind {
    /// `sum_k c_k prod_A (z^A)^{p_kA}`.
    Monomials { m: usize, terms: Vec<(C, Vec<u32>)> },
    /// `(i / 8 pi) q^2 z^2 (2 ln(q z) - 3)` on the principal branch, `m = 1`.
    OvLog { q: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepotential {
    pub kind: PrepotentialKind,
    pub domain: RegularDomain,
}

fn falling(p: u32, d: u32) -> f64 {
    (0..d).map(|k| (p as f64) - k as f64).product()
}

impl Prepotential {
    pub fn monomials(m: usize, terms: Vec<(C, Vec<u32>)>) -> Result<Self> {
        if m == 0 || terms.iter().any(|(_, p)| p.len() != m) {
            return Err(Error::Config("monomial powers must have length m".into()));
        }
        Ok(Self { kind: PrepotentialKind::Monomials { m, terms }, domain: RegularDomain::default() })
    }

    /// One variable, `F = sum_k coeffs[k] z^k`.
    pub fn polynomial(coeffs: &[C]) -> Self {
        let terms = coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm() != 0.0)
            .map(|(k, &c)| (c, vec![k as u32]))
            .collect();
        Self { kind: PrepotentialKind::Monomials { m: 1, terms }, domain: RegularDomain::default() }
    }

    /// `F = 1/2 tau_AB z^A z^B` with symmetric `tau`.
    pub fn quadratic(tau: &DMatrix<C>) -> Result<Self> {
        let m = tau.nrows();
        if tau.ncols() != m || (tau - tau.transpose()).iter().any(|c| c.norm() > 1e-14) {
            return Err(Error::Config("tau must be square and symmetric".into()));
        }
        let mut terms = Vec::new();
        for a in 0..m {
            for b in a..m {
                let mut p = vec![0; m];
                p[a] += 1;
                p[b] += 1;
                let c = if a == b { 0.5 * tau[(a, a)] } else { tau[(a, b)] };
                terms.push((c, p));
            }
        }
        Self::monomials(m, terms)
    }

    pub fn ov_log(q: u32) -> Result<Self> {
        if q == 0 {
            return Err(Error::Config("OV charge q must be positive".into()));
        }
        Ok(Self { kind: PrepotentialKind::OvLog { q }, domain: RegularDomain::default() })
    }

    pub fn with_domain(mut self, domain: RegularDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn m(&self) -> usize {
        match &self.kind {
            PrepotentialKind::Monomials { m, .. } => *m,
            PrepotentialKind::OvLog { .. } => 1,
        }
    }

    /// Declared domain plus the intrinsic singular locus.
    pub fn in_domain(&self, z: &[C]) -> bool {
        if z.len() != self.m() || !self.domain.contains(z) {
            return false;
        }
        match self.kind {
            // principal log: cut along q z in (-inf, 0]
            PrepotentialKind::OvLog { .. } => !(z[0].im == 0.0 && z[0].re <= 0.0),
            PrepotentialKind::Monomials { .. } => true,
        }
    }

    pub fn eval(&self, z: &[C]) -> Result<PrepotentialValues> {
        if z.len() != self.m() {
            return Err(Error::RankMismatch { expected: self.m(), found: z.len() });
        }
        if !self.in_domain(z) {
            return Err(Error::Domain(format!("z = {z:?} outside the regular domain")));
        }
        let m = self.m();
        match &self.kind {
            PrepotentialKind::Monomials { terms, .. } => {
                let deriv = |d: &[u32]| -> C {
                    terms
                        .iter()
                        .map(|(c, p)| {
                            let mut v = *c;
                            for a in 0..m {
                                if d[a] > p[a] {
                                    return ZERO;
                                }
                                v *= falling(p[a], d[a]) * z[a].powu(p[a] - d[a]);
                            }
                            v
                        })
                        .sum()
                };
                let unit = |idx: &[usize]| {
                    let mut d = vec![0u32; m];
                    for &i in idx {
                        d[i] += 1;
                    }
                    deriv(&d)
                };
                Ok(PrepotentialValues {
                    f: unit(&[]),
                    fa: DVector::from_fn(m, |a, _| unit(&[a])),
                    fab: DMatrix::from_fn(m, m, |a, b| unit(&[a, b])),
                    fabc: (0..m).map(|c| DMatrix::from_fn(m, m, |a, b| unit(&[a, b, c]))).collect(),
                })
            }
            PrepotentialKind::OvLog { q } => {
                let q2 = (*q as f64).powi(2);
                let w = z[0];
                let ln = (*q as f64 * w).ln();
                let k = I * q2 / (8.0 * PI);
                Ok(PrepotentialValues {
                    f: k * w * w * (2.0 * ln - 3.0),
                    fa: DVector::from_element(1, 4.0 * k * w * (ln - 1.0)),
                    fab: DMatrix::from_element(1, 1, 4.0 * k * ln),
                    fabc: vec![DMatrix::from_element(1, 1, 4.0 * k / w)],
                })
            }
        }
    }

    /// Degree-two defect `f = z^A F_A - 2F` with `f_A`, `f_AB`.
    pub fn defect(&self, z: &[C]) -> Result<(C, DVector<C>, DMatrix<C>)> {
        let v = self.eval(z)?;
        let m = self.m();
        let zv = DVector::from_column_slice(z);
        let f = zv.dot(&v.fa) - 2.0 * v.f;
        let fa = &v.fab * &zv - &v.fa;
        let fab = DMatrix::from_fn(m, m, |a, b| (0..m).map(|c| z[c] * v.fabc[c][(a, b)]).sum());
        Ok((f, fa, fab))
    }

    /// `Im F_AB` eigenvalues; errors when one is (numerically) zero or when
    /// they have mixed signs.
    pub fn im_fab_spectrum(&self, z: &[C]) -> Result<DVector<f64>> {
        let v = self.eval(z)?;
        let im = v.fab.map(|c| c.im);
        let ev = im.symmetric_eigenvalues();
        let scale = ev.iter().fold(1.0f64, |s, e| s.max(e.abs()));
        if ev.iter().any(|e| e.abs() < 1e-10 * scale) {
            return Err(Error::Domain(format!("Im F_AB degenerate at z = {z:?}")));
        }
        if ev.iter().any(|&e| e > 0.0) && ev.iter().any(|&e| e < 0.0) {
            return Err(Error::Domain(format!("Im F_AB indefinite at z = {z:?}")));
        }
        Ok(ev)
    }
}

/// JSON form: `{"kind": "polynomial" | "ov_log" | "quadratic" | "custom", ...}`.
/// Complex numbers are `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrepotentialConfig {
    pub kind: String,
    #[serde(default)]
    pub coeffs: Vec<[f64; 2]>,
    #[serde(default)]
    pub q: Option<u32>,
    #[serde(default)]
    pub tau: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub terms: Vec<MonomialConfig>,
    #[serde(default)]
    pub domain: RegularDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomialConfig {
    pub coeff: [f64; 2],
    pub powers: Vec<u32>,
}

impl PrepotentialConfig {
    pub fn build(&self) -> Result<Prepotential> {
        let c = |p: &[f64; 2]| C::new(p[0], p[1]);
        let p = match self.kind.as_str() {
            "polynomial" => Prepotential::polynomial(&self.coeffs.iter().map(c).collect::<Vec<_>>()),
            "ov_log" => Prepotential::ov_log(self.q.unwrap_or(1))?,
            "quadratic" => {
                let m = self.tau.len();
                if self.tau.iter().any(|r| r.len() != m) {
                    return Err(Error::Config("tau must be square".into()));
                }
                Prepotential::quadratic(&DMatrix::from_fn(m, m, |a, b| c(&self.tau[a][b])))?
            }
            "custom" => {
                let m = self.terms.first().map(|t| t.powers.len()).unwrap_or(0);
                Prepotential::monomials(m, self.terms.iter().map(|t| (c(&t.coeff), t.powers.clone())).collect())?
            }
            other => return Err(Error::Config(format!("unknown prepotential kind {other:?}"))),
        };
        Ok(p.with_domain(self.domain))
    }
}

/// `Z_{gamma^a}` in lattice order: `(F_A, z^A)`.
pub fn semiflat_central_charges(prep: &Prepotential, z: &[C]) -> Result<Vec<C>> {
    let v = prep.eval(z)?;
    Ok(v.fa.iter().copied().chain(z.iter().copied()).collect())
}

/// `eta_a = Z_a / zeta + psi_a - conj(Z_a) zeta` for every basis charge.
pub fn semiflat_eta(prep: &Prepotential, pt: &FiberPoint, zeta: C) -> Result<Vec<C>> {
    if zeta.norm() == 0.0 {
        return Err(Error::Domain("semi-flat eta is singular at zeta = 0".into()));
    }
    let zs = semiflat_central_charges(prep, &pt.z)?;
    Ok(zs.iter().zip(&pt.psi).map(|(z, &p)| z / zeta + p - z.conj() * zeta).collect())
}

fn point_of(x: &[f64]) -> Result<FiberPoint> {
    FiberPoint::from_real(x)
}

/// `(w_+, w_0, w_-)` at a real-frame point.
pub fn semiflat_omegas(prep: &Prepotential, x: &[f64]) -> Result<(FormMatrix, FormMatrix, FormMatrix)> {
    let pt = point_of(x)?;
    Ok(semiflat_forms(&prep.eval(&pt.z)?.fab))
}

pub fn semiflat_frame(prep: &Prepotential, pt: &FiberPoint) -> Result<FrameData> {
    let v = prep.eval(&pt.z)?;
    prep.im_fab_spectrum(&pt.z)?;
    FrameData::constant_semiflat(&v.fab)
}

/// Rotational generators with their potentials and the moment-map residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct RotAction {
    pub x_plus: DVector<C>,
    pub x_zero: DVector<C>,
    pub x_minus: DVector<C>,
    pub phi_plus_plus: C,
    pub phi_plus: C,
    pub mu: f64,
    /// `u_A dz^A`, `u_A = psi~_A - F_AB psi^B`.
    pub theta_plus: Covector,
    /// Residuals of the equations `n = -2..=2`.
    pub residuals: [f64; 5],
}

/// `X_+ = i f_A d/dpsi~_A`, `X_0 = sum_A (y^A d/dx^A - x^A d/dy^A)`,
/// `X_- = i conj(f_A) d/dpsi~_A`.
pub fn rot_generators(prep: &Prepotential, x: &[f64]) -> Result<[DVector<C>; 3]> {
    let pt = point_of(x)?;
    let m = pt.m();
    let (_, fa, _) = prep.defect(&pt.z)?;
    let mut xp = DVector::zeros(4 * m);
    let mut x0 = DVector::zeros(4 * m);
    let mut xm = DVector::zeros(4 * m);
    for a in 0..m {
        xp[2 * m + a] = I * fa[a];
        xm[2 * m + a] = I * fa[a].conj();
        x0[a] = C::new(pt.z[a].im, 0.0);
        x0[m + a] = C::new(-pt.z[a].re, 0.0);
    }
    Ok([xp, x0, xm])
}

/// Symplectic-gradient generators `X_+ = -i (z^A d/dpsi^A + F_A d/dpsi~_A)`,
/// `X_0 = 0`, `X_- = -conj(X_+)`.
pub fn twisted_generators(prep: &Prepotential, x: &[f64]) -> Result<[DVector<C>; 3]> {
    let pt = point_of(x)?;
    let m = pt.m();
    let v = prep.eval(&pt.z)?;
    let mut xp = DVector::zeros(4 * m);
    for a in 0..m {
        xp[3 * m + a] = -I * pt.z[a];
        xp[2 * m + a] = -I * v.fa[a];
    }
    let xm = -xp.map(|c| c.conj());
    Ok([xp, DVector::zeros(4 * m), xm])
}

pub fn phi_plus_plus(prep: &Prepotential, x: &[f64]) -> Result<C> {
    let pt = point_of(x)?;
    Ok(I * prep.defect(&pt.z)?.0)
}

pub fn phi_plus(prep: &Prepotential, x: &[f64]) -> Result<C> {
    let pt = point_of(x)?;
    let v = prep.eval(&pt.z)?;
    let m = pt.m();
    let s: C = (0..m).map(|a| pt.z[a] * pt.psi[a] - v.fa[a] * pt.psi[m + a]).sum();
    Ok(I * s)
}

/// `mu^sf = -2 Im(conj(z^A) F_A)`.
pub fn mu_sf(prep: &Prepotential, x: &[f64]) -> Result<f64> {
    let pt = point_of(x)?;
    let v = prep.eval(&pt.z)?;
    Ok(-2.0 * pt.z.iter().zip(v.fa.iter()).map(|(z, f)| (z.conj() * f).im).sum::<f64>())
}

/// `L^sf = 2 Im(conj(z^A) F_A) - Im F_AB psi^A psi^B`.
pub fn l_sf(prep: &Prepotential, x: &[f64]) -> Result<f64> {
    let pt = point_of(x)?;
    let v = prep.eval(&pt.z)?;
    let p = pt.psi_electric();
    let m = pt.m();
    let mut l = pt.z.iter().zip(v.fa.iter()).map(|(z, f)| 2.0 * (z.conj() * f).im).sum::<f64>();
    for a in 0..m {
        for b in 0..m {
            l -= v.fab[(a, b)].im * p[a] * p[b];
        }
    }
    Ok(l)
}

/// `mu = -Re(z^A L_{z^A}) + Im(conj(z^A) f_A) - 1/2 Im f_AB psi^A psi^B`,
/// the alternative form through the semi-flat Lagrangian.
pub fn mu_sf_alternative(prep: &Prepotential, x: &[f64]) -> Result<f64> {
    let pt = point_of(x)?;
    let v = prep.eval(&pt.z)?;
    let (_, fa, fab) = prep.defect(&pt.z)?;
    let m = pt.m();
    let p = pt.psi_electric();
    let mut zl = ZERO;
    for c in 0..m {
        let mut lc = -I * (-v.fa[c].conj());
        for a in 0..m {
            lc += -I * pt.z[a].conj() * v.fab[(a, c)];
            for b in 0..m {
                lc -= v.fabc[c][(a, b)] * p[a] * p[b] / (2.0 * I);
            }
        }
        zl += pt.z[c] * lc;
    }
    let mut mu = -zl.re;
    for a in 0..m {
        mu += (pt.z[a].conj() * fa[a]).im;
        for b in 0..m {
            mu -= 0.5 * fab[(a, b)].im * p[a] * p[b];
        }
    }
    Ok(mu)
}

pub fn theta_plus(prep: &Prepotential, x: &[f64]) -> Result<Covector> {
    let pt = point_of(x)?;
    let v = prep.eval(&pt.z)?;
    let m = pt.m();
    let mut th = Covector::zeros(4 * m);
    for a in 0..m {
        let mut u = C::new(pt.psi[a], 0.0);
        for b in 0..m {
            u -= v.fab[(a, b)] * pt.psi[m + b];
        }
        th += dz(m, a) * u;
    }
    Ok(th)
}

fn sup(c: &Covector) -> f64 {
    c.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Left-hand sides `sum_{a+b=n} iota_{X_a} w_b` for `n = -2..=2`.
pub fn moment_map_lhs(gens: &[DVector<C>; 3], omegas: &(FormMatrix, FormMatrix, FormMatrix)) -> [Covector; 5] {
    let [xp, x0, xm] = gens;
    let (wp, w0, wm) = omegas;
    [
        interior(xm, wm),
        interior(xm, w0) + interior(x0, wm),
        interior(xm, wp) + interior(x0, w0) + interior(xp, wm),
        interior(x0, wp) + interior(xp, w0),
        interior(xp, wp),
    ]
}

/// Right-hand sides `d phi_++`, `d phi_+ - i theta_+`, `d mu` and their
/// conjugates, ordered `n = -2..=2`.
pub fn moment_map_rhs(prep: &Prepotential, x: &[f64]) -> Result<[Covector; 5]> {
    let r2 = gradient(|y| phi_plus_plus(prep, y), x)?;
    let r1 = gradient(|y| phi_plus(prep, y), x)? - theta_plus(prep, x)? * I;
    let r0 = gradient(|y| Ok(C::new(mu_sf(prep, y)?, 0.0)), x)?;
    let c = |v: &Covector| v.map(|c| c.conj());
    Ok([c(&r2), -c(&r1), r0, r1, r2])
}

pub fn semiflat_rot_action(prep: &Prepotential, pt: &FiberPoint) -> Result<RotAction> {
    let x = pt.to_real();
    let gens = rot_generators(prep, &x)?;
    let omegas = semiflat_omegas(prep, &x)?;
    let lhs = moment_map_lhs(&gens, &omegas);
    let rhs = moment_map_rhs(prep, &x)?;
    let mut residuals = [0.0; 5];
    for n in 0..5 {
        residuals[n] = sup(&(&lhs[n] - &rhs[n]));
    }
    let [x_plus, x_zero, x_minus] = gens;
    Ok(RotAction {
        x_plus,
        x_zero,
        x_minus,
        phi_plus_plus: phi_plus_plus(prep, &x)?,
        phi_plus: phi_plus(prep, &x)?,
        mu: mu_sf(prep, &x)?,
        theta_plus: theta_plus(prep, &x)?,
        residuals,
    })
}

/// Result of the rotation-invariance criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationInvariance {
    pub invariant: bool,
    pub residual: f64,
}

/// Invariant iff `|Re(conj(z^A) f_A)|` and `|Re f_AB|` stay below `1e-8`.
pub fn rotation_invariance_test(prep: &Prepotential, samples: &[Vec<C>]) -> Result<RotationInvariance> {
    let mut r: f64 = 0.0;
    for z in samples {
        let (_, fa, fab) = prep.defect(z)?;
        let a: f64 = z.iter().zip(fa.iter()).map(|(z, f)| (z.conj() * f).re).sum();
        r = r.max(a.abs());
        r = r.max(fab.iter().map(|c| c.re.abs()).fold(0.0, f64::max));
    }
    Ok(RotationInvariance { invariant: r < 1e-8, residual: r })
}

fn real_matrix_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::SingularForm("phi_AB not invertible".into()))
}

/// `(sigma_+, sigma_0)` from the closed-form expressions
/// `sigma_+ = -d(f_A hbar^A)`, `sigma_0 = i phi_AB (dz^A ^ dzbar^B - h^B ^ hbar^A)`.
pub fn semiflat_sigma_forms(prep: &Prepotential, pt: &FiberPoint) -> Result<(FormMatrix, FormMatrix)> {
    let v = prep.eval(&pt.z)?;
    let (_, fa, fab) = prep.defect(&pt.z)?;
    let m = pt.m();
    let n = 4 * m;
    let phi = v.fab.map(|c| 2.0 * c.im);
    let phi_inv = real_matrix_inverse(&phi)?;
    let cx = |r: f64| C::new(r, 0.0);
    let dzs: Vec<Covector> = (0..m).map(|a| dz(m, a)).collect();
    let dzbs: Vec<Covector> = (0..m).map(|a| dzbar(m, a)).collect();
    // h_B = dpsi~_B - F_BC dpsi^C, b_B = conj(h_B)
    let h_low: Vec<Covector> = (0..m)
        .map(|b| {
            let mut h = dpsi_tilde(m, b);
            for c in 0..m {
                h -= dpsi(m, c) * v.fab[(b, c)];
            }
            h
        })
        .collect();
    let b_low: Vec<Covector> = h_low.iter().map(|h| h.map(|c| c.conj())).collect();
    let raise = |low: &[Covector], k: C| -> Vec<Covector> {
        (0..m)
            .map(|a| (0..m).fold(Covector::zeros(n), |acc, b| acc + &low[b] * (k * phi_inv[(a, b)])))
            .collect()
    };
    let h_up = raise(&h_low, I);
    let hbar_up = raise(&b_low, -I);

    let mut s0 = FormMatrix::zeros(n, n);
    for a in 0..m {
        for b in 0..m {
            s0 += (wedge(&dzs[a], &dzbs[b]) - wedge(&h_up[b], &hbar_up[a])) * (I * phi[(a, b)]);
        }
    }

    // d phi_CD = -i (F_CDE dz^E - conj(F_CDE) dzbar^E)
    let dphi = |c: usize, d: usize| -> Covector {
        (0..m).fold(Covector::zeros(n), |acc, e| {
            acc + (&dzs[e] * v.fabc[e][(c, d)] - &dzbs[e] * v.fabc[e][(c, d)].conj()) * (-I)
        })
    };
    // d phi^AB = -phi^AC d phi_CD phi^DB
    let dphi_up = |a: usize, b: usize| -> Covector {
        let mut acc = Covector::zeros(n);
        for c in 0..m {
            for d in 0..m {
                acc -= dphi(c, d) * cx(phi_inv[(a, c)] * phi_inv[(d, b)]);
            }
        }
        acc
    };
    // d b_B = -conj(F_BCD) dzbar^D ^ dpsi^C
    let db = |b: usize| -> FormMatrix {
        let mut acc = FormMatrix::zeros(n, n);
        for c in 0..m {
            for d in 0..m {
                acc -= wedge(&dzbs[d], &dpsi(m, c)) * v.fabc[d][(b, c)].conj();
            }
        }
        acc
    };
    // d(f_A hbar^A) = df_A ^ hbar^A - i f_A (d phi^AB ^ b_B + phi^AB d b_B)
    let mut dfh = FormMatrix::zeros(n, n);
    for a in 0..m {
        let dfa = (0..m).fold(Covector::zeros(n), |acc, c| acc + &dzs[c] * fab[(a, c)]);
        dfh += wedge(&dfa, &hbar_up[a]);
        for b in 0..m {
            let inner = wedge(&dphi_up(a, b), &b_low[b]) + db(b) * cx(phi_inv[(a, b)]);
            dfh += inner * (-I * fa[a]);
        }
    }
    Ok((-dfh, s0))
}

/// `sigma_m = w_m + d(d mu I_m)` for `m = +, 0`, by finite differences.
pub fn sigma_forms_from_mu(prep: &Prepotential, pt: &FiberPoint) -> Result<(FormMatrix, FormMatrix)> {
    let x = pt.to_real();
    let mu = |y: &[f64]| Ok(C::new(mu_sf(prep, y)?, 0.0));
    let frame_at = |y: &[f64]| semiflat_frame(prep, &point_of(y)?);
    let dp = exterior_d_1form(|y| Ok(gradient(mu, y)? * frame_at(y)?.i_plus()), &x)?;
    let d0 = exterior_d_1form(|y| Ok(gradient(mu, y)? * frame_at(y)?.i3), &x)?;
    let (wp, w0, _) = semiflat_omegas(prep, &x)?;
    Ok((wp + dp, w0 + d0))
}
