//! Toric hyperkahler metrics from an `L`-potential, and the Ooguri-Vafa
//! metric: Gibbons-Hawking data, Bessel and Poisson representations, the
//! moment map, the twistor coordinate `eta~` and its jumps across the BPS rays.
//!
//! Base coordinates are `b = (Re z^A, Im z^A, psi^A)`; the `R^3` coordinates
//! of the Gibbons-Hawking picture are `r^A = (2 Re z^A, 2 Im z^A, psi^A)`.
//! The OV rays are `l_+- : zeta = -+ i (z/|z|) e^u`, oriented outwards.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dpsi, dpsi_tilde, dz, dzbar, fd_partials_scaled, wedge, Covector, FiberPoint, FormMatrix,
    FrameData,
};
use crate::special::{bessel_k0, bessel_k1, ray_quadrature, QuadratureRule};

const I: C = C::new(0.0, 1.0);
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
// relative step for finite differences that get differenced again
const NESTED_STEP: f64 = 2e-3;

fn base_point(z: &[C], psi: &[f64]) -> Vec<f64> {
    let mut b: Vec<f64> = z.iter().map(|w| w.re).collect();
    b.extend(z.iter().map(|w| w.im));
    b.extend_from_slice(psi);
    b
}

fn split_base(b: &[f64]) -> (Vec<C>, Vec<f64>) {
    let m = b.len() / 3;
    ((0..m).map(|a| C::new(b[a], b[m + a])).collect(), b[2 * m..].to_vec())
}

/// Real function `L(z, zbar, psi)` generating a toric hyperkahler metric,
/// with shift functions `rho_A`.
///
/// Derivatives default to finite differences; implementations with closed
/// forms should override them.
pub trait ToricLPotential {
    fn m(&self) -> usize;

    fn l(&self, z: &[C], psi: &[f64]) -> Result<f64>;

    fn rho(&self, _z: &[C], _psi: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.m()))
    }

    /// `(A, k) -> d rho_A / d b_k` in base coordinates.
    fn d_rho(&self, z: &[C], psi: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.m();
        let p = fd_partials_scaled(
            |b| {
                let (z, psi) = split_base(b);
                Ok(self.rho(&z, &psi)?.iter().map(|&v| C::new(v, 0.0)).collect())
            },
            &base_point(z, psi),
            NESTED_STEP,
        )?;
        Ok(DMatrix::from_fn(m, 3 * m, |a, k| p[k][a].re))
    }

    fn l_psi(&self, z: &[C], psi: &[f64]) -> Result<DVector<f64>> {
        let m = self.m();
        let p = fd_partials_scaled(
            |b| {
                let (z, psi) = split_base(b);
                Ok(vec![C::new(self.l(&z, &psi)?, 0.0)])
            },
            &base_point(z, psi),
            NESTED_STEP,
        )?;
        Ok(DVector::from_fn(m, |a, _| p[2 * m + a][0].re))
    }

    fn l_psipsi(&self, z: &[C], psi: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.m();
        let p = fd_partials_scaled(
            |b| {
                let (z, psi) = split_base(b);
                Ok(self.l_psi(&z, &psi)?.iter().map(|&v| C::new(v, 0.0)).collect())
            },
            &base_point(z, psi),
            NESTED_STEP,
        )?;
        Ok(DMatrix::from_fn(m, m, |a, b| p[2 * m + b][a].re))
    }

    /// `L_{z^A} = (d_x - i d_y) L / 2`.
    fn l_z(&self, z: &[C], psi: &[f64]) -> Result<DVector<C>> {
        let m = self.m();
        let p = fd_partials_scaled(
            |b| {
                let (z, psi) = split_base(b);
                Ok(vec![C::new(self.l(&z, &psi)?, 0.0)])
            },
            &base_point(z, psi),
            NESTED_STEP,
        )?;
        Ok(DVector::from_fn(m, |a, _| 0.5 * (p[a][0] - I * p[m + a][0])))
    }

    /// `(A, B) -> L_{psi^A z^B}`.
    fn l_psi_z(&self, z: &[C], psi: &[f64]) -> Result<DMatrix<C>> {
        let m = self.m();
        let p = fd_partials_scaled(
            |b| {
                let (z, psi) = split_base(b);
                Ok(self.l_psi(&z, &psi)?.iter().map(|&v| C::new(v, 0.0)).collect())
            },
            &base_point(z, psi),
            NESTED_STEP,
        )?;
        Ok(DMatrix::from_fn(m, m, |a, b| 0.5 * (p[b][a] - I * p[m + b][a])))
    }
}

/// `L` given by a closure, with vanishing shifts.
pub struct FnLPotential<F> {
    pub m: usize,
    pub f: F,
}

impl<F: Fn(&[C], &[f64]) -> Result<f64>> ToricLPotential for FnLPotential<F> {
    fn m(&self) -> usize {
        self.m
    }

    fn l(&self, z: &[C], psi: &[f64]) -> Result<f64> {
        (self.f)(z, psi)
    }
}

/// Largest violation of `L_{psi^A z^B} = L_{psi^B z^A}` and
/// `L_{psi^A psi^B} + L_{z^A zbar^B} = 0`.
pub fn l_constraint_residual<L: ToricLPotential + ?Sized>(lp: &L, z: &[C], psi: &[f64]) -> Result<f64> {
    let m = lp.m();
    let pz = lp.l_psi_z(z, psi)?;
    let pp = lp.l_psipsi(z, psi)?;
    // L_{z^A zbar^B} = (d_{x^B} + i d_{y^B}) L_{z^A} / 2
    let p = fd_partials_scaled(
        |b| {
            let (z, psi) = split_base(b);
            Ok(lp.l_z(&z, &psi)?.iter().copied().collect())
        },
        &base_point(z, psi),
        NESTED_STEP,
    )?;
    let mut r: f64 = 0.0;
    for a in 0..m {
        for b in 0..m {
            r = r.max((pz[(a, b)] - pz[(b, a)]).norm());
            let lzzb = 0.5 * (p[b][a] + I * p[m + b][a]);
            r = r.max((pp[(a, b)] + lzzb).norm());
        }
    }
    Ok(r)
}

/// `(w_+, w_0, w_-)` of a toric metric at a real-frame point `x`.
///
/// Only `L_{psi psi}`, `L_{psi z}` and `d rho` enter: the `dz^A ^ dz^B` parts
/// of `dL_z ^ dz` cancel and `L_{z zbar} = -L_{psi psi}`.
pub fn toric_forms<L: ToricLPotential + ?Sized>(lp: &L, x: &[f64]) -> Result<(FormMatrix, FormMatrix, FormMatrix)> {
    let pt = FiberPoint::from_real(x)?;
    let m = pt.m();
    if m != lp.m() {
        return Err(Error::RankMismatch { expected: lp.m(), found: m });
    }
    let n = 4 * m;
    let (z, psi) = (pt.z.clone(), pt.psi_electric().to_vec());
    let pp = lp.l_psipsi(&z, &psi)?;
    let pz = lp.l_psi_z(&z, &psi)?;
    let dr = lp.d_rho(&z, &psi)?;
    let mut wp = FormMatrix::zeros(n, n);
    let mut w0 = FormMatrix::zeros(n, n);
    for a in 0..m {
        let mut du = dpsi_tilde(m, a);
        for b in 0..m {
            du[b] += dr[(a, b)];
            du[m + b] += dr[(a, m + b)];
            du[3 * m + b] += dr[(a, 2 * m + b)];
        }
        let mut dlpsi = Covector::zeros(n);
        let mut dlz = Covector::zeros(n);
        for b in 0..m {
            dlpsi += dz(m, b) * pz[(a, b)] + dzbar(m, b) * pz[(a, b)].conj() + dpsi(m, b) * C::new(pp[(a, b)], 0.0);
            dlz += dzbar(m, b) * C::new(-pp[(a, b)], 0.0) + dpsi(m, b) * pz[(b, a)];
        }
        let dlzb = dlz.map(|c| c.conj());
        wp += wedge(&(&du + dlpsi * (0.5 * I)), &dz(m, a));
        w0 += wedge(&du, &dpsi(m, a)) + wedge(&dlz, &dz(m, a)) * (0.5 * I)
            - wedge(&dlzb, &dzbar(m, a)) * (0.5 * I);
    }
    let wm = -wp.map(|c| c.conj());
    Ok((wp, w0, wm))
}

pub fn toric_frame<L: ToricLPotential + ?Sized>(lp: &L, pt: &FiberPoint) -> Result<FrameData> {
    let (wp, w0, wm) = toric_forms(lp, &pt.to_real())?;
    FrameData::from_forms(wp, w0, wm)
}

/// Gibbons-Hawking data at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct GhData {
    /// `Phi_AB = -L_{psi psi} / 2`.
    pub phi: DMatrix<f64>,
    /// `A_C` in base coordinates `(dx^B, dy^B, dpsi^B)`.
    pub connection: Vec<DVector<f64>>,
    pub bogomolny_residual: f64,
    /// False when `Phi` is not positive definite; reported, not an error.
    pub positive_definite: bool,
}

fn connection<L: ToricLPotential + ?Sized>(lp: &L, b: &[f64]) -> Result<Vec<DVector<f64>>> {
    let m = lp.m();
    let (z, psi) = split_base(b);
    let pz = lp.l_psi_z(&z, &psi)?;
    let dr = lp.d_rho(&z, &psi)?;
    Ok((0..m)
        .map(|c| {
            DVector::from_fn(3 * m, |k, _| {
                let base = if k < m {
                    pz[(c, k)].im
                } else if k < 2 * m {
                    pz[(c, k - m)].re
                } else {
                    0.0
                };
                base + dr[(c, k)]
            })
        })
        .collect())
}

/// `Phi`, `A` and the residual of `dA_C = *^B dPhi_CB`, i.e.
/// `d_{Ai} A_{C,Bj} - d_{Bj} A_{C,Ai} = eps_ijk d_{Ak} Phi_BC` in `r` coordinates.
pub fn gh_assemble<L: ToricLPotential + ?Sized>(lp: &L, z: &[C], psi: &[f64]) -> Result<GhData> {
    let m = lp.m();
    let b = base_point(z, psi);
    let phi = lp.l_psipsi(z, psi)? * -0.5;
    let conn = connection(lp, &b)?;
    // r-coordinate index (A, i) -> base index, with dr/db factor
    let slot = |a: usize, i: usize| -> (usize, f64) {
        match i {
            0 => (a, 2.0),
            1 => (m + a, 2.0),
            _ => (2 * m + a, 1.0),
        }
    };
    let da = fd_partials_scaled(
        |y| Ok(connection(lp, y)?.iter().flat_map(|v| v.iter().map(|&x| C::new(x, 0.0))).collect()),
        &b,
        1e-3,
    )?;
    let dphi = fd_partials_scaled(
        |y| {
            let (z, psi) = split_base(y);
            Ok((lp.l_psipsi(&z, &psi)? * -0.5).iter().map(|&x| C::new(x, 0.0)).collect())
        },
        &b,
        1e-3,
    )?;
    // A_{C, r(B,j)} = A_{C, b(B,j)} / (dr/db); d/dr = (1/(dr/db)) d/db
    let a_r = |c: usize, bi: usize, j: usize, di: usize, i: usize| -> f64 {
        let (kb, fb) = slot(bi, j);
        let (kd, fd) = slot(di, i);
        da[kd][c * 3 * m + kb].re / (fb * fd)
    };
    let eps = |i: usize, j: usize, k: usize| -> f64 {
        match (i, j, k) {
            (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
            (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
            _ => 0.0,
        }
    };
    let mut res: f64 = 0.0;
    for c in 0..m {
        for ai in 0..m {
            for bj in 0..m {
                for i in 0..3 {
                    for j in 0..3 {
                        let f = a_r(c, bj, j, ai, i) - a_r(c, ai, i, bj, j);
                        let mut rhs = 0.0;
                        for k in 0..3 {
                            let (kk, fk) = slot(ai, k);
                            // Phi stored column-major: (B, C) at B + m C
                            rhs += eps(i, j, k) * dphi[kk][bj + m * c].re / fk;
                        }
                        res = res.max((f - rhs).abs());
                    }
                }
            }
        }
    }
    let positive_definite = phi.clone().symmetric_eigenvalues().iter().all(|&e| e > 0.0);
    Ok(GhData { phi, connection: conn, bogomolny_residual: res, positive_definite })
}

/// Ooguri-Vafa parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvParams {
    pub q: u32,
    /// Minimum number of Bessel terms; more are added until the tail bound
    /// drops below `1e-15`.
    pub k_max: usize,
    /// Minimum number of Poisson pairs; raised when `|q psi|` is large.
    pub n_max: usize,
    /// Optional bound on `|z|`.
    pub z_max: Option<f64>,
    /// Rapidity step of the ray quadrature.
    pub quad_step: f64,
}

impl Default for OvParams {
    fn default() -> Self {
        Self { q: 1, k_max: 60, n_max: 2000, z_max: None, quad_step: 0.05 }
    }
}

impl OvParams {
    pub fn with_q(q: u32) -> Self {
        Self { q, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.k_max == 0 || self.n_max == 0 {
            return Err(Error::Config("q, k_max and n_max must be positive".into()));
        }
        if !(self.quad_step > 0.0) {
            return Err(Error::Config("quad_step must be positive".into()));
        }
        Ok(())
    }

    fn qf(&self) -> f64 {
        self.q as f64
    }

    fn check_z(&self, z: C) -> Result<()> {
        self.validate()?;
        if z.norm() == 0.0 {
            return Err(Error::Domain("OV Bessel route needs z != 0".into()));
        }
        if let Some(r) = self.z_max {
            if z.norm() > r {
                return Err(Error::Domain(format!("|z| = {} beyond the declared bound {r}", z.norm())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiMethod {
    Bessel,
    Poisson,
}

/// A truncated series with its tail bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    pub terms: usize,
    pub tail_bound: f64,
}

/// Bessel sums over `k >= 1` at `r = |qz|`, `t = q psi`.
#[derive(Debug, Clone, Copy, Default)]
struct BesselSums {
    k0_cos_k2: f64,
    k0_sin_k: f64,
    k0_cos: f64,
    k1_cos_k: f64,
    k1_sin: f64,
    terms: usize,
    tail: f64,
}

fn bessel_sums(p: &OvParams, r: f64, t: f64, with_k1: bool) -> Result<BesselSums> {
    let mut s = BesselSums::default();
    // tail of sum_{j > k} K(2 j r) bounded by K(2 (k+1) r) / (1 - e^{-2r})
    let ratio = 1.0 / (1.0 - (-2.0 * r).exp());
    let mut k = 1usize;
    loop {
        let kf = k as f64;
        let x = 2.0 * kf * r;
        let k0 = bessel_k0(x)?;
        let (c, sn) = ((kf * t).cos(), (kf * t).sin());
        s.k0_cos_k2 += k0 * c / (kf * kf);
        s.k0_sin_k += k0 * sn / kf;
        s.k0_cos += k0 * c;
        let mut lead = k0;
        if with_k1 {
            let k1 = bessel_k1(x)?;
            s.k1_cos_k += k1 * c / kf;
            s.k1_sin += k1 * sn;
            lead = k1;
        }
        s.terms = k;
        let tail = bessel_k1(x + 2.0 * r)?.max(lead) * ratio;
        if k >= p.k_max && tail < 1e-15 {
            s.tail = tail;
            break;
        }
        if k > 5_000_000 {
            return Err(Error::NonConvergence { history: vec![tail] });
        }
        k += 1;
    }
    Ok(s)
}

/// `L^inst = -(2/pi) sum_k K0(2k|qz|) cos(k q psi) / k^2`.
pub fn ov_linst(p: &OvParams, z: C, psi: f64) -> Result<SeriesValue> {
    p.check_z(z)?;
    let s = bessel_sums(p, p.qf() * z.norm(), p.qf() * psi, false)?;
    Ok(SeriesValue { value: -2.0 / PI * s.k0_cos_k2, terms: s.terms, tail_bound: 2.0 / PI * s.tail })
}

/// `c_0` making the Poisson form of `Phi` equal to the Bessel form.
pub fn poisson_c0() -> f64 {
    ((2.0 * PI).ln() - EULER_GAMMA) / PI
}

/// `sum_{n > N} n^-s` by Euler-Maclaurin.
fn zeta_tail(s: f64, n: f64) -> f64 {
    n.powf(1.0 - s) / (s - 1.0) - 0.5 * n.powf(-s) + s * n.powf(-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * n.powf(-s - 3.0) / 720.0
}

fn reduce_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn poisson_pairs(p: &OvParams, a: f64) -> usize {
    p.n_max.max((40.0 * a.abs() / (2.0 * PI)) as usize + 1)
}

/// Gibbons-Hawking potential of the OV metric.
pub fn ov_phi(p: &OvParams, z: C, psi: f64, method: PhiMethod) -> Result<f64> {
    let q2 = p.qf() * p.qf();
    match method {
        PhiMethod::Bessel => {
            p.check_z(z)?;
            let r = p.qf() * z.norm();
            let s = bessel_sums(p, r, p.qf() * psi, false)?;
            Ok(q2 / (4.0 * PI) * (2.0 * r.ln() - 4.0 * s.k0_cos))
        }
        PhiMethod::Poisson => {
            p.validate()?;
            let a = reduce_angle(p.qf() * psi);
            let b = 4.0 * (p.qf() * z.norm()).powi(2);
            if a * a + b == 0.0 {
                return Err(Error::SingularPoint(format!("OV node at z = {z}, psi = {psi}")));
            }
            let n = p.n_max;
            let mut s = 1.0 / (a * a + b).sqrt() - poisson_c0();
            for k in 1..=n {
                let x = 2.0 * PI * k as f64;
                let sp = ((x + a).powi(2) + b).sqrt();
                let sm = ((x - a).powi(2) + b).sqrt();
                // 1/sp + 1/sm - 2/x without cancellation
                s += ((x - sp) * sm + (x - sm) * sp) / (sp * sm * x);
            }
            let nf = n as f64;
            let w = 2.0 * PI;
            s += (2.0 * a * a - b) * zeta_tail(3.0, nf) / w.powi(3)
                + (2.0 * a.powi(4) - 6.0 * a * a * b + 0.75 * b * b) * zeta_tail(5.0, nf) / w.powi(5);
            Ok(-0.5 * q2 * s)
        }
    }
}

/// `1/2 sum_n (sqrt((q psi + 2 pi n)^2 + 4|qz|^2) - 2|qz|^2 c_|n| - 1/c_|n|)`,
/// with only the square root at `n = 0` and no reduction of `q psi`.
pub fn ov_mu_poisson(p: &OvParams, z: C, psi: f64) -> Result<f64> {
    p.validate()?;
    let a = p.qf() * psi;
    let b = 4.0 * (p.qf() * z.norm()).powi(2);
    if a * a + b == 0.0 {
        return Err(Error::SingularPoint(format!("OV node at z = {z}, psi = {psi}")));
    }
    let n = poisson_pairs(p, a);
    let mut s = (a * a + b).sqrt();
    for k in 1..=n {
        let x = 2.0 * PI * k as f64;
        let (tp, tm) = (x + a, x - a);
        let sp = (tp * tp + b).sqrt();
        let sm = (tm * tm + b).sqrt();
        // sp + sm - b/x - 2x, using sqrt(t^2 + b) = |t| + b / (sqrt(t^2 + b) + |t|)
        s += (tp.abs() + tm.abs() - 2.0 * x) + b * (1.0 / (sp + tp.abs()) + 1.0 / (sm + tm.abs()) - 1.0 / x);
    }
    let nf = n as f64;
    let w = 2.0 * PI;
    s += (a * a * b - 0.25 * b * b) * zeta_tail(3.0, nf) / w.powi(3)
        + (a.powi(4) * b - 1.5 * a * a * b * b + b.powi(3) / 8.0) * zeta_tail(5.0, nf) / w.powi(5);
    Ok(0.5 * s)
}

/// Moment map of the rotational action, normalized to agree with
/// `mu^sf + (1/4 pi i) sum int (Z/zeta - Zbar zeta) ln(1 - X)`: the Poisson sum
/// plus `-c_0 |qz|^2 - ((q psi)^2 - 2|qz|^2) / 4 pi - pi / 6`.
pub fn ov_mu(p: &OvParams, z: C, psi: f64) -> Result<f64> {
    let r2 = (p.qf() * z.norm()).powi(2);
    let a = p.qf() * psi;
    Ok(ov_mu_poisson(p, z, psi)? - poisson_c0() * r2 - (a * a - 2.0 * r2) / (4.0 * PI) - PI / 6.0)
}

/// `mu^sf - Re(z L^inst_z)` from the Bessel series.
pub fn ov_mu_bessel(p: &OvParams, z: C, psi: f64) -> Result<f64> {
    p.check_z(z)?;
    let model = OvModel::new(*p)?;
    let (_, _, _, lz, _) = model.inst_parts(z, psi)?;
    let r = p.qf() * z.norm();
    let mu_sf = -(p.qf() * p.qf() / PI) * z.norm_sqr() * (r.ln() - 1.0);
    Ok(mu_sf - (z * lz).re)
}

/// OV `L = L^sf + L^inst` with `rho = -Re F'' psi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OvModel {
    pub params: OvParams,
}

impl OvModel {
    pub fn new(params: OvParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// `(L, L_psi, L_psipsi, L_z, L_psi z)` of the instanton part.
    fn inst_parts(&self, z: C, psi: f64) -> Result<(f64, f64, f64, C, C)> {
        let p = &self.params;
        p.check_z(z)?;
        let q = p.qf();
        let s = bessel_sums(p, q * z.norm(), q * psi, true)?;
        let drdz = q * z.conj() / (2.0 * z.norm());
        Ok((
            -2.0 / PI * s.k0_cos_k2,
            2.0 * q / PI * s.k0_sin_k,
            2.0 * q * q / PI * s.k0_cos,
            4.0 / PI * drdz * s.k1_cos_k,
            -4.0 * q / PI * drdz * s.k1_sin,
        ))
    }

    fn check(&self, z: &[C], psi: &[f64]) -> Result<(C, f64)> {
        if z.len() != 1 || psi.len() != 1 {
            return Err(Error::RankMismatch { expected: 1, found: z.len() });
        }
        let w = z[0];
        if w.im == 0.0 && w.re <= 0.0 {
            return Err(Error::Domain("OV principal log cut".into()));
        }
        Ok((w, psi[0]))
    }

    fn k(&self) -> f64 {
        self.params.qf().powi(2) / (2.0 * PI)
    }
}

impl ToricLPotential for OvModel {
    fn m(&self) -> usize {
        1
    }

    fn l(&self, z: &[C], psi: &[f64]) -> Result<f64> {
        let (w, p) = self.check(z, psi)?;
        let lr = (self.params.qf() * w.norm()).ln();
        let sf = 2.0 * self.k() * w.norm_sqr() * (lr - 1.0) - self.k() * lr * p * p;
        Ok(sf + self.inst_parts(w, p)?.0)
    }

    fn rho(&self, z: &[C], psi: &[f64]) -> Result<DVector<f64>> {
        let (w, p) = self.check(z, psi)?;
        Ok(DVector::from_element(1, self.k() * w.arg() * p))
    }

    fn d_rho(&self, z: &[C], psi: &[f64]) -> Result<DMatrix<f64>> {
        let (w, p) = self.check(z, psi)?;
        let (k, r2) = (self.k(), w.norm_sqr());
        Ok(DMatrix::from_row_slice(1, 3, &[-k * p * w.im / r2, k * p * w.re / r2, k * w.arg()]))
    }

    fn l_psi(&self, z: &[C], psi: &[f64]) -> Result<DVector<f64>> {
        let (w, p) = self.check(z, psi)?;
        let lr = (self.params.qf() * w.norm()).ln();
        Ok(DVector::from_element(1, -2.0 * self.k() * lr * p + self.inst_parts(w, p)?.1))
    }

    fn l_psipsi(&self, z: &[C], psi: &[f64]) -> Result<DMatrix<f64>> {
        let (w, p) = self.check(z, psi)?;
        let lr = (self.params.qf() * w.norm()).ln();
        Ok(DMatrix::from_element(1, 1, -2.0 * self.k() * lr + self.inst_parts(w, p)?.2))
    }

    fn l_z(&self, z: &[C], psi: &[f64]) -> Result<DVector<C>> {
        let (w, p) = self.check(z, psi)?;
        let q = self.params.qf();
        let ln = (q * w).ln();
        let f1 = I * q * q / (2.0 * PI) * w * (ln - 1.0);
        let f2 = I * q * q / (2.0 * PI) * ln;
        let f3 = I * q * q / (2.0 * PI * w);
        let sf = -I * (w.conj() * f2 - f1.conj()) - f3 * p * p / (2.0 * I);
        Ok(DVector::from_element(1, sf + self.inst_parts(w, p)?.3))
    }

    fn l_psi_z(&self, z: &[C], psi: &[f64]) -> Result<DMatrix<C>> {
        let (w, p) = self.check(z, psi)?;
        let sf = -self.k() * p / w;
        Ok(DMatrix::from_element(1, 1, sf + self.inst_parts(w, p)?.4))
    }
}

/// Rapidity rule wide enough that `exp(-2 q |z| cosh L)` is negligible.
fn ray_rule(p: &OvParams, z: C, extra: f64) -> Result<QuadratureRule> {
    let qz = p.qf() * z.norm();
    let half = 5.0f64.max((30.0 / qz).max(1.0).acosh() + extra);
    let n = (2.0 * half / p.quad_step).ceil() as usize + 1;
    QuadratureRule::new(half, n | 1)
}

/// `l_+` for `s = 1`, `l_-` for `s = -1`.
fn ray_direction(z: C, s: f64) -> C {
    -s * I * z / z.norm()
}

fn eta(z: C, psi: f64, zeta: C) -> C {
    z / zeta + psi - z.conj() * zeta
}

fn log_factor(q: f64, s: f64, e: C) -> C {
    (C::new(1.0, 0.0) - (s * I * q * e).exp()).ln()
}

/// `int_{-L}^{L} (e^u + w)/(e^u - w) du`.
pub(crate) fn kernel_integral(half: f64, w: C) -> C {
    -2.0 * half + 2.0 * ((C::new(half.exp(), 0.0) - w).ln() - (C::new((-half).exp(), 0.0) - w).ln())
}

/// Leading Euler-Maclaurin term for the trapezoid sum of `K(u) (g(u) - g0)`
/// when `g` vanishes at both ends, `dk = K'`: subtract it from the sum.
pub(crate) fn endpoint_correction(rule: &QuadratureRule, dk: impl Fn(f64) -> C, g0: C) -> C {
    let h = rule.step();
    let l = rule.half_width;
    -h * h / 12.0 * g0 * (dk(l) - dk(-l))
}

/// `d/du (e^u + w)/(e^u - w)`.
pub(crate) fn kernel_derivative(u: f64, w: C) -> C {
    let e = C::new(u.exp(), 0.0);
    -2.0 * w * e / ((e - w) * (e - w))
}

/// Semi-flat magnetic coordinate `F'/zeta + psi~ - conj(F') zeta`.
pub fn ov_eta_tilde_sf(p: &OvParams, pt: &FiberPoint, zeta: C) -> Result<C> {
    let z = pt.z[0];
    let q = p.qf();
    let f1 = I * q * q / (2.0 * PI) * z * ((q * z).ln() - 1.0);
    Ok(f1 / zeta + pt.psi[0] - f1.conj() * zeta)
}

/// `eta~(zeta)` from the contour-integral formula with kernel
/// `(zeta' + zeta)/(zeta' - zeta)` over `l_+` and `l_-`.
pub fn ov_eta_tilde(p: &OvParams, pt: &FiberPoint, zeta: C) -> Result<C> {
    p.check_z(*pt.z.first().ok_or_else(|| Error::Domain("empty point".into()))?)?;
    if pt.m() != 1 {
        return Err(Error::RankMismatch { expected: 1, found: pt.m() });
    }
    if zeta.norm() == 0.0 || !zeta.is_finite() {
        return Err(Error::Domain("eta~ needs zeta in C^x".into()));
    }
    let z = pt.z[0];
    let psi = pt.psi[1];
    let q = p.qf();
    let rule = ray_rule(p, z, 0.0)?;
    let mut total = ov_eta_tilde_sf(p, pt, zeta)?;
    for s in [1.0, -1.0] {
        let d = ray_direction(z, s);
        let w = zeta / d;
        let ang = w.arg();
        if ang.abs() < PI / 2.0 && ang.sin().abs() < 1e-3 {
            return Err(Error::RayProximity(ang.sin().abs()));
        }
        let g = |u: f64| log_factor(q, s, eta(z, psi, d * u.exp()));
        let kern = |u: f64| {
            let e = C::new(u.exp(), 0.0);
            (e + w) / (e - w)
        };
        let integral = if ang.abs() < 0.5 && w.norm().ln().abs() < rule.half_width {
            // subtract the value at the pole, integrate the kernel exactly
            let g0 = log_factor(q, s, eta(z, psi, zeta));
            ray_quadrature(&rule, |u| kern(u) * (g(u) - g0))
                - endpoint_correction(&rule, |u| kernel_derivative(u, w), g0)
                + g0 * kernel_integral(rule.half_width, w)
        } else {
            ray_quadrature(&rule, |u| kern(u) * g(u))
        };
        total -= s * q / (4.0 * PI) * integral;
    }
    Ok(total)
}

/// Coefficient of `zeta^n` (`n >= -1`) in the expansion of `eta~` at `zeta = 0`.
pub fn ov_eta_tilde_laurent(p: &OvParams, pt: &FiberPoint, n: i32) -> Result<C> {
    p.check_z(pt.z[0])?;
    let z = pt.z[0];
    let psi = pt.psi[1];
    let q = p.qf();
    let f1 = I * q * q / (2.0 * PI) * z * ((q * z).ln() - 1.0);
    let sf = match n {
        -1 => f1,
        0 => C::new(pt.psi[0], 0.0),
        1 => -f1.conj(),
        _ => C::new(0.0, 0.0),
    };
    if n < 0 {
        return Ok(sf);
    }
    let rule = ray_rule(p, z, n as f64)?;
    let mut inst = C::new(0.0, 0.0);
    for s in [1.0, -1.0] {
        let d = ray_direction(z, s);
        let weight = if n == 0 { 1.0 } else { 2.0 };
        let integral = ray_quadrature(&rule, |u| {
            let zp = d * u.exp();
            weight * zp.powi(-n) * log_factor(q, s, eta(z, psi, zp))
        });
        inst -= s * q / (4.0 * PI) * integral;
    }
    Ok(sf + inst)
}

/// Extrapolated mismatch `e^{i eta~(zeta0 (1 + i d))} - e^{i eta~(zeta0 (1 - i d))} factor`
/// as `d -> 0`, from `d, d/2, d/4, d/8` with three Richardson levels.
pub fn side_limit_mismatch(p: &OvParams, pt: &FiberPoint, zeta0: C, factor: C, delta: f64) -> Result<f64> {
    let diff = |d: f64| -> Result<C> {
        let ccw = (I * ov_eta_tilde(p, pt, zeta0 * C::new(1.0, d))?).exp();
        let cw = (I * ov_eta_tilde(p, pt, zeta0 * C::new(1.0, -d))?).exp();
        Ok(ccw - cw * factor)
    };
    let d: Vec<C> = (0..4).map(|k| diff(delta / f64::from(1 << k))).collect::<Result<_>>()?;
    // Neville table on h = delta 2^-k, dropping h, h^2, h^3
    let mut t = d;
    for level in 1..4 {
        let f = f64::from(1 << level);
        t = t.windows(2).map(|w| (f * w[1] - w[0]) / (f - 1.0)).collect();
    }
    Ok(t[0].norm())
}

/// KS jump of `e^{i eta~}` across both rays at `|zeta| in {0.5, 1, 2}`.
///
/// Crossing `l_+` counterclockwise multiplies by `(1 - e^{i q eta})^q`,
/// crossing `l_-` by `(1 - e^{-i q eta})^{-q}`.
pub fn ov_jump_residual(p: &OvParams, pt: &FiberPoint, delta: f64) -> Result<f64> {
    if !(delta > 1e-4 && delta < 1e-1) {
        return Err(Error::Domain(format!("delta must lie in (1e-4, 1e-1), got {delta}")));
    }
    let z = pt.z[0];
    let psi = pt.psi[1];
    let q = p.qf();
    let mut worst: f64 = 0.0;
    for s in [1.0, -1.0] {
        for u in [-0.7f64, 0.0, 0.7] {
            let zeta0 = ray_direction(z, s) * u.exp();
            let x = (s * I * q * eta(z, psi, zeta0)).exp();
            let factor = (C::new(1.0, 0.0) - x).powf(s * q);
            worst = worst.max(side_limit_mismatch(p, pt, zeta0, factor, delta)?);
        }
    }
    Ok(worst)
}
