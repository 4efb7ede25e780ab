//! Pointwise hyperkahler linear algebra and finite-difference exterior
//! calculus.
//!
//! Tangent vectors and forms live in the real frame
//! `x = (Re z^A, Im z^A, psi~_A, psi^A)` of dimension `4m`. A 1-form is a row
//! vector, a 2-form an antisymmetric matrix with `w(X, Y) = X^T W Y`, and an
//! endomorphism acts on covectors from the right, `(a I)(X) = a(I X)`.
//! `dz^A = e_A + i e_{m+A}`, `alpha ^ beta = alpha^T beta - beta^T alpha`.
//!
//! From the complex triple `w_+, w_0, w_-` the real forms are
//! `w_1 = w_+ - w_-`, `w_2 = -i (w_+ + w_-)`, `w_3 = w_0`, the complex
//! structures `I_1 = w_3^-1 w_2`, `I_2 = w_1^-1 w_3`, `I_3 = w_2^-1 w_1`, and
//! the metric `g = -w_3 I_3`.

use nalgebra::{DMatrix, DVector, RowDVector};
use num_complex::Complex64 as C;

use crate::error::{Error, Result};

pub type FormMatrix = DMatrix<C>;
pub type Endomorphism = DMatrix<C>;
pub type Covector = RowDVector<C>;

const I: C = C::new(0.0, 1.0);
const ONE: C = C::new(1.0, 0.0);

/// Condition-number threshold above which a form counts as degenerate.
pub const MAX_CONDITION: f64 = 1e12;

/// A point of the torus fibration: base coordinates `z` and fiber angles
/// `psi = (psi~_A, psi^A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberPoint {
    pub z: Vec<C>,
    pub psi: Vec<f64>,
}

impl FiberPoint {
    pub fn new(z: Vec<C>, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != 2 * z.len() {
            return Err(Error::RankMismatch { expected: 2 * z.len(), found: psi.len() });
        }
        Ok(Self { z, psi })
    }

    pub fn m(&self) -> usize {
        self.z.len()
    }

    pub fn psi_tilde(&self) -> &[f64] {
        &self.psi[..self.m()]
    }

    pub fn psi_electric(&self) -> &[f64] {
        &self.psi[self.m()..]
    }

    pub fn to_real(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.z.iter().map(|z| z.re).collect();
        x.extend(self.z.iter().map(|z| z.im));
        x.extend_from_slice(&self.psi);
        x
    }

    pub fn from_real(x: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() % 4 != 0 {
            return Err(Error::Domain(format!("real frame needs length 4m, got {}", x.len())));
        }
        let m = x.len() / 4;
        let z = (0..m).map(|a| C::new(x[a], x[m + a])).collect();
        Ok(Self { z, psi: x[2 * m..].to_vec() })
    }
}

/// `dz^A`, `dz-bar^A`, `dpsi~_A`, `dpsi^A` in a `4m` real frame.
pub fn dz(m: usize, a: usize) -> Covector {
    let mut v = Covector::zeros(4 * m);
    v[a] = ONE;
    v[m + a] = I;
    v
}

pub fn dzbar(m: usize, a: usize) -> Covector {
    dz(m, a).map(|c| c.conj())
}

pub fn dpsi_tilde(m: usize, a: usize) -> Covector {
    let mut v = Covector::zeros(4 * m);
    v[2 * m + a] = ONE;
    v
}

pub fn dpsi(m: usize, a: usize) -> Covector {
    let mut v = Covector::zeros(4 * m);
    v[3 * m + a] = ONE;
    v
}

pub fn wedge(a: &Covector, b: &Covector) -> FormMatrix {
    a.transpose() * b - b.transpose() * a
}

/// `iota_X w = w(X, .)`.
pub fn interior(x: &DVector<C>, w: &FormMatrix) -> Covector {
    x.transpose() * w
}

fn max_abs(m: &DMatrix<C>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn check_invertible(w: &FormMatrix, name: &str) -> Result<()> {
    let sv = w.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::SingularForm(format!("{name}: condition number {:.3e}", smax / smin)));
    }
    Ok(())
}

fn solve(a: &FormMatrix, b: &FormMatrix, name: &str) -> Result<Endomorphism> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::SingularForm(format!("{name} not invertible")))
}

/// `max_ij |I_i I_j + delta_ij - eps_ijk I_k|`.
pub fn quaternion_residual(i1: &Endomorphism, i2: &Endomorphism, i3: &Endomorphism) -> f64 {
    let n = i1.nrows();
    let id = Endomorphism::identity(n, n);
    let is = [i1, i2, i3];
    let mut r: f64 = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let mut m = is[a] * is[b];
            if a == b {
                m += &id;
            } else {
                let c = 3 - a - b;
                let sign = if (b + 3 - a) % 3 == 1 { 1.0 } else { -1.0 };
                m -= is[c] * C::new(sign, 0.0);
            }
            r = r.max(max_abs(&m));
        }
    }
    r
}

/// `I_1 = w_3^-1 w_2`, `I_2 = w_1^-1 w_3`, `I_3 = w_2^-1 w_1` and the
/// quaternion residual.
pub fn complex_structures_from_forms(
    w1: &FormMatrix,
    w2: &FormMatrix,
    w3: &FormMatrix,
) -> Result<(Endomorphism, Endomorphism, Endomorphism, f64)> {
    check_invertible(w1, "omega_1")?;
    check_invertible(w2, "omega_2")?;
    check_invertible(w3, "omega_3")?;
    let i1 = solve(w3, w2, "omega_3")?;
    let i2 = solve(w1, w3, "omega_1")?;
    let i3 = solve(w2, w1, "omega_2")?;
    let r = quaternion_residual(&i1, &i2, &i3);
    Ok((i1, i2, i3, r))
}

/// Forms, complex structures and metric at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub omega_plus: FormMatrix,
    pub omega_zero: FormMatrix,
    pub omega_minus: FormMatrix,
    pub i1: Endomorphism,
    pub i2: Endomorphism,
    pub i3: Endomorphism,
    pub metric: DMatrix<f64>,
    pub quaternion_residual: f64,
}

impl FrameData {
    pub fn from_forms(omega_plus: FormMatrix, omega_zero: FormMatrix, omega_minus: FormMatrix) -> Result<Self> {
        let w1 = &omega_plus - &omega_minus;
        let w2 = (&omega_plus + &omega_minus) * (-I);
        let (i1, i2, i3, quaternion_residual) = complex_structures_from_forms(&w1, &w2, &omega_zero)?;
        let g = -(&omega_zero * &i3);
        let metric = g.map(|c| c.re);
        let metric = (&metric + metric.transpose()) * 0.5;
        Ok(Self { omega_plus, omega_zero, omega_minus, i1, i2, i3, metric, quaternion_residual })
    }

    /// Constant frame of the semi-flat metric with `F_AB = tau`.
    pub fn constant_semiflat(tau: &DMatrix<C>) -> Result<Self> {
        let (wp, w0, wm) = semiflat_forms(tau);
        Self::from_forms(wp, w0, wm)
    }

    /// Flat `H^m`, the semi-flat frame with `F_AB = i delta_AB`.
    pub fn flat(m: usize) -> Self {
        Self::constant_semiflat(&(DMatrix::identity(m, m) * I)).expect("flat frame is regular")
    }

    pub fn dim(&self) -> usize {
        self.i1.nrows()
    }

    pub fn omega_real(&self) -> [FormMatrix; 3] {
        [
            &self.omega_plus - &self.omega_minus,
            (&self.omega_plus + &self.omega_minus) * (-I),
            self.omega_zero.clone(),
        ]
    }

    pub fn i_zero(&self) -> &Endomorphism {
        &self.i3
    }

    /// `I_+ = (I_1 + i I_2) / 2`.
    pub fn i_plus(&self) -> Endomorphism {
        (&self.i1 + &self.i2 * I) * C::new(0.5, 0.0)
    }

    /// `I_- = -(I_1 - i I_2) / 2`.
    pub fn i_minus(&self) -> Endomorphism {
        (&self.i1 - &self.i2 * I) * C::new(-0.5, 0.0)
    }

    /// `I_u = u_1 I_1 + u_2 I_2 + u_3 I_3`.
    pub fn i_u(&self, u: [f64; 3]) -> Endomorphism {
        &self.i1 * C::new(u[0], 0.0) + &self.i2 * C::new(u[1], 0.0) + &self.i3 * C::new(u[2], 0.0)
    }

    /// `max |conj(w_m) - (-1)^m w_-m|`.
    pub fn reality_residual(&self) -> f64 {
        let a = max_abs(&(self.omega_plus.map(|c| c.conj()) + &self.omega_minus));
        let b = max_abs(&(self.omega_zero.map(|c| c.conj()) - &self.omega_zero));
        a.max(b)
    }

    /// Largest pairwise difference of `-w_i I_i`, `i = 1, 2, 3`.
    pub fn metric_consistency(&self) -> f64 {
        let w = self.omega_real();
        let g: Vec<DMatrix<C>> = [&self.i1, &self.i2, &self.i3]
            .iter()
            .zip(&w)
            .map(|(i, w)| -(w * *i))
            .collect();
        max_abs(&(&g[0] - &g[1])).max(max_abs(&(&g[1] - &g[2]))).max(max_abs(&(&g[0] - &g[2])))
    }

    pub fn metric_eigenvalues(&self) -> DVector<f64> {
        self.metric.clone().symmetric_eigenvalues()
    }
}

/// `w_+ = dpsi~_A ^ dz^A + dF_A ^ dpsi^A`,
/// `w_0 = dz^A ^ dF-bar_A + dz-bar^A ^ dF_A + dpsi~_A ^ dpsi^A`,
/// `w_- = -conj(w_+)` with `dF_A = F_AB dz^B`.
pub fn semiflat_forms(tau: &DMatrix<C>) -> (FormMatrix, FormMatrix, FormMatrix) {
    let m = tau.nrows();
    let n = 4 * m;
    let mut wp = FormMatrix::zeros(n, n);
    let mut w0 = FormMatrix::zeros(n, n);
    for a in 0..m {
        let mut df = Covector::zeros(n);
        for b in 0..m {
            df += dz(m, b) * tau[(a, b)];
        }
        let dfb = df.map(|c| c.conj());
        wp += wedge(&dpsi_tilde(m, a), &dz(m, a)) + wedge(&df, &dpsi(m, a));
        w0 += wedge(&dz(m, a), &dfb) + wedge(&dzbar(m, a), &df) + wedge(&dpsi_tilde(m, a), &dpsi(m, a));
    }
    let wm = -wp.map(|c| c.conj());
    (wp, w0, wm)
}

/// `P^{0,1}_I = (1 + i I) / 2`.
pub fn p01(i: &Endomorphism) -> Endomorphism {
    let n = i.nrows();
    (Endomorphism::identity(n, n) + i * I) * C::new(0.5, 0.0)
}

/// `P_N(zeta) = P^{0,1}_{I_0} + i zeta I_-`, regular at `zeta = 0`.
pub fn p_north(frame: &FrameData, zeta: C) -> Result<Endomorphism> {
    if !zeta.is_finite() {
        return Err(Error::Domain("P_N needs finite zeta".into()));
    }
    Ok(p01(&frame.i3) + frame.i_minus() * (I * zeta))
}

/// `P_S` in the coordinate `1/zeta`: `P^{1,0}_{I_0} - (i / zeta) I_+`.
pub fn p_south(frame: &FrameData, zeta: C) -> Result<Endomorphism> {
    if zeta.norm() == 0.0 {
        return Err(Error::Domain("P_S is singular at zeta = 0".into()));
    }
    let n = frame.dim();
    let p10 = Endomorphism::identity(n, n) - p01(&frame.i3);
    Ok(p10 - frame.i_plus() * (I / zeta))
}

/// `I(zeta) = I_+ / zeta + I_0 + zeta I_-`.
pub fn i_of_zeta(frame: &FrameData, zeta: C) -> Result<Endomorphism> {
    if zeta.norm() == 0.0 {
        return Err(Error::Domain("I(zeta) is singular at zeta = 0".into()));
    }
    Ok(frame.i_plus() / zeta + &frame.i3 + frame.i_minus() * zeta)
}

/// `(P_N, P_S, I(zeta))` at `zeta != 0`.
pub fn holomorphic_projectors(frame: &FrameData, zeta: C) -> Result<(Endomorphism, Endomorphism, Endomorphism)> {
    Ok((p_north(frame, zeta)?, p_south(frame, zeta)?, i_of_zeta(frame, zeta)?))
}

/// Unit vector of the twistor line point `zeta`: `x_3 = (1-|z|^2)/(1+|z|^2)`,
/// `x_1 + i x_2 = -2 zeta / (1 + |zeta|^2)`.
pub fn u_from_zeta(zeta: C) -> [f64; 3] {
    let r2 = zeta.norm_sqr();
    let w = -2.0 * zeta / (1.0 + r2);
    [w.re, w.im, (1.0 - r2) / (1.0 + r2)]
}

/// `x_+ = (x_1 + i x_2)/2`, `x_0 = x_3`, `x_- = -(x_1 - i x_2)/2`.
pub fn spherical_components(u: [f64; 3]) -> (C, C, C) {
    (
        C::new(0.5 * u[0], 0.5 * u[1]),
        C::new(u[2], 0.0),
        C::new(-0.5 * u[0], 0.5 * u[1]),
    )
}

/// `max_i max_{X,Y} |s(X, I_i Y) - s(Y, I_i X)|` over coordinate vectors.
pub fn hyper11_residual(sigma: &FormMatrix, frame: &FrameData) -> f64 {
    [&frame.i1, &frame.i2, &frame.i3]
        .iter()
        .map(|i| {
            let m = sigma * *i;
            max_abs(&(&m - m.transpose()))
        })
        .fold(0.0, f64::max)
}

/// Three-form coefficients `t_ijk`, fully antisymmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeForm {
    pub n: usize,
    pub data: Vec<C>,
}

impl ThreeForm {
    pub fn get(&self, i: usize, j: usize, k: usize) -> C {
        self.data[(i * self.n + j) * self.n + k]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `(iota_X t)_jk = X^i t_ijk`.
    pub fn interior(&self, x: &DVector<C>) -> FormMatrix {
        FormMatrix::from_fn(self.n, self.n, |j, k| (0..self.n).map(|i| x[i] * self.get(i, j, k)).sum())
    }
}

/// Finite-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

fn stencil_error(e: Error, y: &[f64]) -> Error {
    match e {
        Error::Domain(_) | Error::SingularPoint(_) | Error::SingularForm(_) => Error::Stencil(y.to_vec()),
        other => other,
    }
}

/// Central-difference partials `out[i] = d_i f` of a vector-valued field,
/// with one Richardson level.
pub fn fd_partials<F>(f: F, x: &[f64]) -> Result<Vec<Vec<C>>>
where
    F: Fn(&[f64]) -> Result<Vec<C>>,
{
    fd_partials_scaled(f, x, 1e-4)
}

/// `fd_partials` with step `scale * max(1, |x_i|)`. Larger steps suit nested
/// differences, where roundoff dominates.
pub fn fd_partials_scaled<F>(f: F, x: &[f64], scale: f64) -> Result<Vec<Vec<C>>>
where
    F: Fn(&[f64]) -> Result<Vec<C>>,
{
    let eval = |i: usize, s: f64| -> Result<Vec<C>> {
        let mut y = x.to_vec();
        y[i] += s;
        f(&y).map_err(|e| stencil_error(e, &y))
    };
    let central = |i: usize, s: f64| -> Result<Vec<C>> {
        let p = eval(i, s)?;
        let m = eval(i, -s)?;
        Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * s)).collect())
    };
    (0..x.len())
        .map(|i| {
            let h = scale * x[i].abs().max(1.0);
            let coarse = central(i, h)?;
            let fine = central(i, 0.5 * h)?;
            Ok(fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect())
        })
        .collect()
}

/// `df` of a scalar field.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<Covector>
where
    F: Fn(&[f64]) -> Result<C>,
{
    let p = fd_partials(|y| f(y).map(|v| vec![v]), x)?;
    Ok(Covector::from_iterator(x.len(), p.into_iter().map(|v| v[0])))
}

/// Matrix of second partials `H_ij = d_i d_j f` by nested differences.
pub fn hessian<F>(f: F, x: &[f64]) -> Result<DMatrix<C>>
where
    F: Fn(&[f64]) -> Result<C>,
{
    let p = fd_partials(|y| Ok(gradient(&f, y)?.iter().copied().collect()), x)?;
    let n = x.len();
    Ok(DMatrix::from_fn(n, n, |i, j| p[i][j]))
}

/// `d alpha` for a 1-form field: `(d alpha)_ik = d_i alpha_k - d_k alpha_i`.
pub fn exterior_d_1form<F>(alpha: F, x: &[f64]) -> Result<FormMatrix>
where
    F: Fn(&[f64]) -> Result<Covector>,
{
    let p = fd_partials(|y| Ok(alpha(y)?.iter().copied().collect()), x)?;
    let n = x.len();
    Ok(FormMatrix::from_fn(n, n, |i, k| p[i][k] - p[k][i]))
}

/// `d w` for a 2-form field: `(dw)_ijk = d_i w_jk + d_j w_ki + d_k w_ij`.
pub fn exterior_d_2form<F>(omega: F, x: &[f64]) -> Result<ThreeForm>
where
    F: Fn(&[f64]) -> Result<FormMatrix>,
{
    let n = x.len();
    let p = fd_partials(|y| Ok(omega(y)?.as_slice().to_vec()), x)?;
    // column-major storage: w_jk at j + n k
    let w = |i: usize, j: usize, k: usize| p[i][j + n * k];
    let mut data = vec![C::new(0.0, 0.0); n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                data[(i * n + j) * n + k] = w(i, j, k) + w(j, k, i) + w(k, i, j);
            }
        }
    }
    Ok(ThreeForm { n, data })
}

/// `(df P^{0,1}, df (1 - P^{0,1}))`, the `dbar` and `del` parts of `df`.
pub fn split_differential(df: &Covector, p01: &Endomorphism) -> (Covector, Covector) {
    let dbar = df * p01;
    (df - &dbar, dbar)
}

/// `d d^c`-type second derivative `d(df P(x))`, equal to `del dbar f` for an
/// integrable structure whose `(0,1)` projector is `P`.
pub fn ddbar<F, P>(f: F, projector: P, x: &[f64]) -> Result<FormMatrix>
where
    F: Fn(&[f64]) -> Result<C>,
    P: Fn(&[f64]) -> Result<Endomorphism>,
{
    exterior_d_1form(|y| Ok(gradient(&f, y)? * projector(y)?), x)
}

/// `L_X w = d(iota_X w) + iota_X dw`.
pub fn lie_derivative<V, W>(vector: V, omega: W, x: &[f64]) -> Result<FormMatrix>
where
    V: Fn(&[f64]) -> Result<DVector<C>>,
    W: Fn(&[f64]) -> Result<FormMatrix>,
{
    let d_iota = exterior_d_1form(|y| Ok(interior(&vector(y)?, &omega(y)?)), x)?;
    let dw = exterior_d_2form(&omega, x)?;
    Ok(d_iota + dw.interior(&vector(x)?))
}

/// Scalar field on the real frame.
pub type ScalarField<'a> = dyn Fn(&[f64]) -> Result<C> + 'a;

/// `max_n |d phi_{n-1} I_+ + d phi_n I_0 + d phi_{n+1} I_-|` over interior `n`.
pub fn chain_recursion_residual(phis: &[&ScalarField], frame: &FrameData, x: &[f64]) -> Result<f64> {
    if phis.len() < 3 {
        return Err(Error::Domain(format!("chain needs three members, got {}", phis.len())));
    }
    let d: Vec<Covector> = phis.iter().map(|f| gradient(f, x)).collect::<Result<_>>()?;
    let (ip, im) = (frame.i_plus(), frame.i_minus());
    Ok(d.windows(3)
        .map(|w| {
            let r = &w[0] * &ip + &w[1] * &frame.i3 + &w[2] * &im;
            r.iter().map(|c| c.norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max))
}

/// `|del_u dbar_u phi_n - del_0 dbar_0 (x_- phi_{n+1} + x_0 phi_n + x_+ phi_{n-1})|`
/// (Frobenius), with `triplet = [phi_{n-1}, phi_n, phi_{n+1}]`.
pub fn spherical_ddbar_residual<Fr>(
    triplet: [&ScalarField; 3],
    frame_field: Fr,
    x: &[f64],
    u: [f64; 3],
) -> Result<f64>
where
    Fr: Fn(&[f64]) -> Result<FrameData>,
{
    let (xp, x0, xm) = spherical_components(u);
    let lhs = ddbar(triplet[1], |y| Ok(p01(&frame_field(y)?.i_u(u))), x)?;
    let combo = |y: &[f64]| -> Result<C> {
        Ok(xm * triplet[2](y)? + x0 * triplet[1](y)? + xp * triplet[0](y)?)
    };
    let rhs = ddbar(combo, |y| Ok(p01(&frame_field(y)?.i3)), x)?;
    Ok((lhs - rhs).norm())
}
