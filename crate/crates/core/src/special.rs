//! Complex dilogarithm, Rogers-type dilogarithm, the Bessel function `K0`
//! and a uniform trapezoid rule in rapidity for integrals along BPS rays.
//!
//! All logarithms use the principal branch. `Li2` has its cut on `[1, inf)`;
//! points exactly on the cut are evaluated as the limit from `Im z < 0`.

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

const PI2_6: f64 = PI * PI / 6.0;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `B_{2k} / (2k+1)!` for `k = 1..=20`.
const BERNOULLI_OVER_FACT: [f64; 20] = {
    const B: [f64; 20] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
        -3617.0 / 510.0,
        43867.0 / 798.0,
        -174611.0 / 330.0,
        854513.0 / 138.0,
        -236364091.0 / 2730.0,
        8553103.0 / 6.0,
        -23749461029.0 / 870.0,
        8615841276005.0 / 14322.0,
        -7709321041217.0 / 510.0,
        2577687858367.0 / 6.0,
        -26315271553053477373.0 / 1919190.0,
        2929993913841559.0 / 6.0,
        -261082718496449122051.0 / 13530.0,
    ];
    let mut out = [0.0; 20];
    let mut fact = 1.0; // (2k+1)!
    let mut k = 0;
    while k < 20 {
        let n = 2 * (k + 1) + 1;
        fact *= ((n - 1) * n) as f64;
        out[k] = B[k] / fact;
        k += 1;
    }
    out
};

/// Principal branch of the dilogarithm `Li2(z)`.
pub fn dilog(z: C) -> C {
    if z.re == 0.0 && z.im == 0.0 {
        return C::new(0.0, 0.0);
    }
    if z.im == 0.0 && z.re >= 1.0 {
        let x = z.re;
        if x == 1.0 {
            return C::new(PI2_6, 0.0);
        }
        // limit from below the cut
        let lx = x.ln();
        let re = PI * PI / 3.0 - 0.5 * lx * lx - dilog(C::new(1.0 / x, 0.0)).re;
        return C::new(re, -PI * lx);
    }
    if z.norm_sqr() > 1.0 {
        let l = (-z).ln();
        return -PI2_6 - 0.5 * l * l - dilog(1.0 / z);
    }
    if z.re > 0.5 {
        let w = C::new(1.0, 0.0) - z;
        return PI2_6 - z.ln() * w.ln() - dilog(w);
    }
    dilog_bernoulli(z)
}

/// Series in `w = -ln(1-z)`, valid for `|z| <= 1`, `Re z <= 1/2`.
fn dilog_bernoulli(z: C) -> C {
    let w = -(C::new(1.0, 0.0) - z).ln();
    let w2 = w * w;
    let mut sum = w - 0.25 * w2;
    let mut pw = w * w2;
    for c in BERNOULLI_OVER_FACT {
        let term = c * pw;
        sum += term;
        if term.norm() < 1e-17 * sum.norm() {
            break;
        }
        pw *= w2;
    }
    sum
}

/// `L_sigma(z) = Li2(z) + (1/2) ln(z/sigma) ln(1-z)`.
pub fn rogers_l(sigma: i32, z: C) -> Result<C> {
    if sigma != 1 && sigma != -1 {
        return Err(Error::Domain(format!("sigma must be +1 or -1, got {sigma}")));
    }
    if z.norm() == 0.0 || (z - 1.0).norm() == 0.0 {
        return Err(Error::Domain(format!("rogers_l undefined at z = {z}")));
    }
    let s = sigma as f64;
    // adding +0 turns a negative zero imaginary part into +0 so that
    // negative reals map to +i pi
    let zs = C::new(z.re * s, z.im * s) + C::new(0.0, 0.0);
    Ok(dilog(z) + 0.5 * zs.ln() * (C::new(1.0, 0.0) - z).ln())
}

/// `Li2(z) + 1/2 log_z ln(1 - z)` with an explicit branch `log_z` of
/// `ln(sigma z)`, for sums along a path where the principal branch would jump.
pub fn rogers_l_with_log(z: C, log_z: C) -> Result<C> {
    if z.norm() == 0.0 || (z - 1.0).norm() == 0.0 {
        return Err(Error::Domain(format!("rogers_l undefined at z = {z}")));
    }
    Ok(dilog(z) + 0.5 * log_z * (C::new(1.0, 0.0) - z).ln())
}

/// Modified Bessel function `K0(x)` for `x > 0`.
///
/// Power series below `x = 2`, Steed's continued fraction on `[2, 40)`,
/// and the large-argument asymptotic expansion from `x = 40` on.
pub fn bessel_k0(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("bessel_k0 requires x > 0, got {x}")));
    }
    Ok(if x < 2.0 {
        k0_series(x)
    } else if x < K0_ASYMPTOTIC_FROM {
        k0_continued_fraction(x)
    } else {
        k0_asymptotic(x, 30)
    })
}

pub(crate) const K0_ASYMPTOTIC_FROM: f64 = 40.0;

/// `K0(x) = -(ln(x/2) + gamma) I0(x) + sum_k (x^2/4)^k / (k!)^2 H_k`.
pub fn k0_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let lead = -((0.5 * x).ln() + EULER_GAMMA);
    let mut term = 1.0; // (x^2/4)^k / (k!)^2
    let mut harmonic = 0.0;
    let mut i0 = 1.0;
    let mut tail = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        term *= y / (kf * kf);
        harmonic += 1.0 / kf;
        i0 += term;
        tail += term * harmonic;
        if term * harmonic.max(1.0) < 1e-18 * (i0 + tail) {
            break;
        }
    }
    lead * i0 + tail
}

/// Steed's continued fraction for `K0` (Temme's CF2), accurate for `x >= 2`.
pub fn k0_continued_fraction(x: f64) -> f64 {
    k01_continued_fraction(x).0
}

/// `(K0(x), K1(x))` from one pass of the continued fraction.
fn k01_continued_fraction(x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 1..10_000 {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 && (delh / h).abs() < 1e-17 {
            break;
        }
    }
    let k0 = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    (k0, k0 * (x + 0.5 - a1 * h) / x)
}

/// `K0(x) ~ sqrt(pi/2x) e^{-x} sum_k (-1)^k ((2k-1)!!)^2 / (k! (8x)^k)`,
/// truncated at the smallest term or after `max_terms`.
pub fn k0_asymptotic(x: f64, max_terms: usize) -> f64 {
    k_asymptotic(0.0, x, max_terms)
}

/// Hankel expansion of `K_nu` with `mu = 4 nu^2`.
fn k_asymptotic(mu: f64, x: f64, max_terms: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..max_terms {
        let kf = k as f64;
        let next = term * (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
    }
    (PI / (2.0 * x)).sqrt() * (-x).exp() * sum
}

/// `K1(x) = 1/x + I1(x) ln(x/2) - (x/4) sum_k (psi(k+1) + psi(k+2)) (x^2/4)^k / (k! (k+1)!)`.
pub fn k1_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let ln = (0.5 * x).ln();
    let mut term = 1.0; // (x^2/4)^k / (k! (k+1)!)
    let mut psi1 = -EULER_GAMMA; // psi(k+1)
    let mut psi2 = 1.0 - EULER_GAMMA; // psi(k+2)
    let mut i1 = 1.0;
    let mut tail = psi1 + psi2;
    for k in 1..200 {
        let kf = k as f64;
        term *= y / (kf * (kf + 1.0));
        psi1 += 1.0 / kf;
        psi2 += 1.0 / (kf + 1.0);
        i1 += term;
        let t = term * (psi1 + psi2);
        tail += t;
        if t.abs() < 1e-18 * tail.abs().max(1.0) && term < 1e-18 * i1 {
            break;
        }
    }
    1.0 / x + 0.5 * x * i1 * ln - 0.25 * x * tail
}

/// Modified Bessel function `K1(x)` for `x > 0`, same regimes as `K0`.
pub fn bessel_k1(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("bessel_k1 requires x > 0, got {x}")));
    }
    Ok(if x < 2.0 {
        k1_series(x)
    } else if x < K0_ASYMPTOTIC_FROM {
        k01_continued_fraction(x).1
    } else {
        k_asymptotic(4.0, x, 30)
    })
}

/// Uniform trapezoid rule in rapidity on `[-L, L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub half_width: f64,
    pub count: usize,
}

impl QuadratureRule {
    pub const DEFAULT_HALF_WIDTH: f64 = 5.0;
    pub const DEFAULT_COUNT: usize = 201;

    pub fn new(half_width: f64, count: usize) -> Result<Self> {
        if !(half_width > 0.0) || count < 3 {
            return Err(Error::Domain(format!(
                "quadrature needs L > 0 and N >= 3 (got L = {half_width}, N = {count})"
            )));
        }
        let h = 2.0 * half_width / (count - 1) as f64;
        let nodes: Vec<f64> = (0..count)
            .map(|i| {
                // symmetric by construction
                let j = i as f64 - (count - 1) as f64 / 2.0;
                j * h
            })
            .collect();
        let mut weights = vec![h; count];
        weights[0] *= 0.5;
        weights[count - 1] *= 0.5;
        Ok(Self { nodes, weights, half_width, count })
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_width / (self.count - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::new(Self::DEFAULT_HALF_WIDTH, Self::DEFAULT_COUNT).expect("valid defaults")
    }
}

/// `sum_i w_i f(u_i)`.
pub fn ray_quadrature<F: Fn(f64) -> C>(rule: &QuadratureRule, integrand: F) -> C {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&u, &w)| w * integrand(u))
        .sum()
}

#[cfg(test)]
mod tests {
    #[test]
    fn k1_against_integral_and_derivative() {
        // K1(x) = int_0^inf e^{-x cosh t} cosh t dt
        let oracle = |x: f64| {
            let h = 1e-3;
            let mut s = 0.5 * (-x).exp();
            let mut t: f64 = h;
            loop {
                let v = (-x * t.cosh()).exp() * t.cosh();
                s += v;
                if v < 1e-300 || t > 50.0 {
                    break;
                }
                t += h;
            }
            s * h
        };
        for &x in &[0.01, 0.3, 1.0, 1.99, 2.0, 2.01, 5.0, 17.0, 39.9, 40.0, 60.0] {
            let k1 = super::bessel_k1(x).unwrap();
            let o = oracle(x);
            assert!(((k1 - o) / o).abs() < 1e-11, "x={x}: {k1} vs {o}");
            let h = 1e-5 * x.min(1.0);
            let d = (super::bessel_k0(x + h).unwrap() - super::bessel_k0(x - h).unwrap()) / (2.0 * h);
            assert!(((k1 + d) / k1).abs() < 1e-8, "x={x}: {}", (k1 + d) / k1);
        }
        // frozen from the integral oracle
        assert!((super::bessel_k1(1.0).unwrap() - 0.601_907_230_197_234_6).abs() < 1e-13);
        assert!(super::bessel_k1(0.0).is_err());
    }

    use super::*;

    // Independent oracle: K0(x) = int_0^inf exp(-x cosh t) dt, fine trapezoid.
    fn k0_integral(x: f64) -> f64 {
        let h: f64 = 1e-3;
        let mut s = 0.5 * (-x).exp();
        let mut t = h;
        loop {
            let v = (-x * t.cosh()).exp();
            s += v;
            if v < 1e-300 || t > 40.0 {
                break;
            }
            t += h;
        }
        s * h
    }

    fn dilog_series(z: C) -> C {
        let mut s = C::new(0.0, 0.0);
        let mut p = z;
        for k in 1..20_000 {
            let t = p / (k as f64 * k as f64);
            s += t;
            if t.norm() < 1e-18 {
                break;
            }
            p *= z;
        }
        s
    }

    #[test]
    fn dilog_special_values() {
        assert_eq!(dilog(C::new(0.0, 0.0)), C::new(0.0, 0.0));
        assert!((dilog(C::new(1.0, 0.0)).re - PI2_6).abs() < 1e-15);
        let l2 = 2f64.ln();
        let expect = PI * PI / 12.0 - 0.5 * l2 * l2;
        assert!((dilog(C::new(0.5, 0.0)).re - expect).abs() < 1e-14);
        assert!((expect - 0.582_240_526_5).abs() < 1e-10);
        assert!((dilog_series(C::new(0.5, 0.0)).re - expect).abs() < 1e-14);
    }

    #[test]
    fn dilog_matches_series_inside_disk() {
        for &(re, im) in &[(0.3, 0.2), (-0.7, 0.4), (0.6, -0.7), (-0.95, -0.1), (0.1, 0.9)] {
            let z = C::new(re, im);
            assert!((dilog(z) - dilog_series(z)).norm() < 1e-13, "z = {z}");
        }
    }

    #[test]
    fn dilog_reflection_outside_disk() {
        for &(re, im) in &[(2.0, 0.5), (-3.0, 1.0), (1.5, -2.0), (0.2, 4.0)] {
            let z = C::new(re, im);
            let lhs = dilog(z) + dilog(C::new(1.0, 0.0) - z);
            let rhs = PI2_6 - z.ln() * (C::new(1.0, 0.0) - z).ln();
            assert!((lhs - rhs).norm() < 1e-12, "z = {z}");
        }
    }

    #[test]
    fn dilog_cut_is_limit_from_below() {
        let x = 3.0;
        let on = dilog(C::new(x, 0.0));
        let below = dilog(C::new(x, -1e-9));
        assert!((on - below).norm() < 1e-7);
        assert!((on.im + PI * x.ln()).abs() < 1e-14);
    }

    #[test]
    fn rogers_values() {
        let d = dilog(C::new(0.5, 0.0));
        let l = 0.5f64.ln();
        let p = rogers_l(1, C::new(0.5, 0.0)).unwrap();
        assert!((p - (d + 0.5 * l * l)).norm() < 1e-15);
        let m = rogers_l(-1, C::new(0.5, 0.0)).unwrap();
        let expect = d + 0.5 * C::new(-0.5, 0.0).ln() * l;
        assert!((m - expect).norm() < 1e-15);
        let tiny = rogers_l(1, C::new(1e-12, 0.0)).unwrap();
        assert!(tiny.norm() < 1e-10);
        assert!(rogers_l(1, C::new(0.0, 0.0)).is_err());
        assert!(rogers_l(1, C::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn k0_reference_values() {
        let k1 = bessel_k0(1.0).unwrap();
        let k2 = bessel_k0(2.0).unwrap();
        assert!((k1 - 0.421_024_438_241).abs() < 1e-12);
        // frozen from the integral oracle below
        assert!((k2 - 0.113_893_872_749_533_4).abs() < 1e-12);
        for &x in &[0.01, 0.3, 1.0, 1.99, 2.0, 3.5, 7.0, 15.0, 30.0] {
            let o = k0_integral(x);
            let v = bessel_k0(x).unwrap();
            assert!(((v - o) / o).abs() < 1e-12, "x = {x}: {v} vs {o}");
        }
        assert!(bessel_k0(0.0).is_err());
        assert!(bessel_k0(-1.0).is_err());
    }

    #[test]
    fn k0_regime_switches_are_continuous() {
        let a = k0_series(2.0);
        let b = k0_continued_fraction(2.0);
        assert!(((a - b) / b).abs() < 1e-11);
        let x = K0_ASYMPTOTIC_FROM;
        let c = k0_continued_fraction(x);
        let d = k0_asymptotic(x, 30);
        assert!(((c - d) / c).abs() < 1e-11);
    }

    #[test]
    fn k0_large_x_normalization() {
        for &x in &[50.0, 200.0, 600.0] {
            let r = bessel_k0(x).unwrap() * x.exp() * (2.0 * x / PI).sqrt();
            assert!((r - 1.0).abs() < 1.0 / (7.0 * x));
        }
    }

    #[test]
    fn quadrature_layout_and_k0_identity() {
        let rule = QuadratureRule::default();
        assert_eq!(rule.nodes.len(), 201);
        for i in 0..rule.count {
            assert!((rule.nodes[i] + rule.nodes[rule.count - 1 - i]).abs() < 1e-15);
            assert!(rule.weights[i] > 0.0);
        }
        assert!(rule.nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(ray_quadrature(&rule, |_| C::new(0.0, 0.0)), C::new(0.0, 0.0));
        let v = ray_quadrature(&rule, |u| C::new((-2.0 * u.cosh()).exp(), 0.0));
        assert!((v.re - 2.0 * bessel_k0(2.0).unwrap()).abs() < 1e-13);
        assert!((v.re - 0.227_787_745_499_066_8).abs() < 1e-12);
        let fine = QuadratureRule::new(5.0, 401).unwrap();
        let w = ray_quadrature(&fine, |u| C::new((-2.0 * u.cosh()).exp(), 0.0));
        assert!((v - w).norm() < 1e-12);
    }

    #[test]
    fn quadrature_oscillating_integrand() {
        // even in u apart from the phase, so the result is real
        let f = |u: f64| (C::new(-2.0 * u.cosh(), u)).exp();
        let a = ray_quadrature(&QuadratureRule::default(), f);
        let b = ray_quadrature(&QuadratureRule::new(6.0, 801).unwrap(), f);
        assert!((a - b).norm() < 1e-12);
        assert!(a.im.abs() < 1e-15);
    }

    #[test]
    fn invalid_rules_rejected() {
        assert!(QuadratureRule::new(0.0, 201).is_err());
        assert!(QuadratureRule::new(5.0, 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn landen_identity(r in 0.0f64..0.999, th in -3.14f64..3.14) {
            let z = C::from_polar(r, th);
            let w = z / (z - 1.0);
            let l = (C::new(1.0, 0.0) - z).ln();
            let res = dilog(z) + dilog(w) + 0.5 * l * l;
            proptest::prop_assert!(res.norm() < 1e-10);
        }

        #[test]
        fn dilog_conjugation_symmetry(re in -3.0f64..0.99, im in 0.01f64..3.0) {
            let z = C::new(re, im);
            proptest::prop_assert!((dilog(z.conj()) - dilog(z).conj()).norm() < 1e-12);
        }
    }
}
