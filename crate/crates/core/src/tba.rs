//! Instanton-corrected twistor coordinates from the ray integral equation,
//! their Laurent data, and the hyperkahler quantities assembled from them.
//!
//! Rays are parametrised as `zeta = d e^u` with `d = -i Z / |Z|`, so that
//! `i eta^sf = -2 |Z| cosh u + i psi` on the ray of `Z`. The grid stores the
//! instanton part `eta - eta^sf` at the quadrature nodes; keeping it apart
//! from the large semi-flat part lets the Picard iteration converge to
//! roundoff.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::charge::{
    ks_transform_pow, ordered_factors, sigma, Charge, StabilityData, SymplecticLattice, TorusPoint,
};
use crate::error::{Error, Result};
use crate::geometry::{
    dz, fd_partials, fd_partials_scaled, gradient, hyper11_residual, interior, wedge, Covector,
    FiberPoint, FormMatrix, FrameData, MAX_CONDITION,
};
use crate::semiflat::{phi_plus_plus, semiflat_central_charges, Prepotential};
use crate::special::{rogers_l_with_log, QuadratureRule};
use crate::toric::{endpoint_correction, kernel_derivative, kernel_integral};
use crate::C;

const I: C = C::new(0.0, 1.0);
const ZERO: C = C::new(0.0, 0.0);

/// Relative angular distance to a ray below which evaluation is refused.
pub const RAY_GUARD: f64 = 1e-3;
/// Angular window around a ray inside which the kernel pole is subtracted.
const SUBTRACT_WINDOW: f64 = 0.5;
/// Size of the central-charge tilt that orders charges inside a wall bundle.
const TILT: f64 = 1e-3;
/// Solver tolerance at finite-difference stencil points.
pub const STENCIL_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Under-relaxation factor in `(0, 1]`.
    pub relaxation: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100, relaxation: 1.0 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::Config(format!(
                "solver options need tol > 0, max_iter >= 1, relaxation in (0, 1]; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Charges sharing one ray direction, with their node values.
#[derive(Debug, Clone, PartialEq)]
pub struct RayGrid {
    /// Unit `d`, the ray is `{d e^u}`.
    pub direction: C,
    pub charges: Vec<Charge>,
    pub omegas: Vec<u32>,
    pub sigmas: Vec<f64>,
    /// Scaled `Z_gamma` and `psi_gamma` of each charge.
    pub z: Vec<C>,
    pub psi: Vec<f64>,
    /// Angular order inside a wall bundle; proportional charges share a position.
    pub positions: Vec<usize>,
    /// `inst[j][i] = eta_j - eta^sf_j` at node `i`.
    pub inst: Vec<Vec<C>>,
    /// `ln(1 - X_j)` at the nodes.
    pub log_values: Vec<Vec<C>>,
}

impl RayGrid {
    pub fn is_bundle(&self) -> bool {
        self.positions.iter().any(|&p| p != 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwistorFunctionGrid {
    pub lattice: SymplecticLattice,
    pub rule: QuadratureRule,
    /// Scaled basis central charges.
    pub central: Vec<C>,
    pub psi: Vec<f64>,
    pub rays: Vec<RayGrid>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub per_ray_node_counts: Vec<usize>,
}

fn charge_z(central: &[C], g: &Charge) -> C {
    g.0.iter().zip(central).map(|(&q, z)| z * q as f64).sum()
}

fn charge_psi(psi: &[f64], g: &Charge) -> f64 {
    g.0.iter().zip(psi).map(|(&q, p)| q as f64 * p).sum()
}

fn eta_sf(z: C, psi: f64, zeta: C) -> C {
    z / zeta + psi - z.conj() * zeta
}

fn log_one_minus(sigma: f64, eta: C) -> Result<C> {
    let x = sigma * (I * eta).exp();
    if !(x.norm() < 1.0) {
        return Err(Error::Divergence(x.norm()));
    }
    Ok((C::new(1.0, 0.0) - x).ln())
}

fn coth(x: f64) -> f64 {
    1.0 / x.tanh()
}

/// `int_{-L}^{L} coth((u - u0)/2) du` as a principal value, `|u0| < L`.
fn pv_coth_integral(half: f64, u0: f64) -> f64 {
    -2.0 * half + 2.0 * (half.exp() - u0.exp()).ln() - 2.0 * (u0.exp() - (-half).exp()).ln()
}

fn node_derivative(g: &[C], i: usize, h: f64) -> C {
    let n = g.len();
    if i >= 2 && i + 2 < n {
        (-g[i + 2] + 8.0 * g[i + 1] - 8.0 * g[i - 1] + g[i - 2]) / (12.0 * h)
    } else if i >= 1 && i + 1 < n {
        (g[i + 1] - g[i - 1]) / (2.0 * h)
    } else if i == 0 {
        (g[1] - g[0]) / h
    } else {
        (g[n - 1] - g[n - 2]) / h
    }
}

/// Side limit of `int du coth((u - u0)/2) g(u)` on the ray itself; `s = +1`
/// approaches from the counterclockwise side.
fn side_sum(rule: &QuadratureRule, g: &[C], u0: f64, g0: C, s: f64) -> C {
    let h = rule.step();
    let inside = u0.abs() < rule.half_width - 0.5 * h;
    let mut acc = ZERO;
    for (l, (&u, &w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let du = u - u0;
        if du.abs() < 1e-9 * h {
            if inside {
                acc += w * 2.0 * node_derivative(g, l, h);
            }
        } else if inside {
            acc += w * coth(0.5 * du) * (g[l] - g0);
        } else {
            acc += w * coth(0.5 * du) * g[l];
        }
    }
    if inside {
        // d/du coth((u - u0)/2) = -csch^2((u - u0)/2) / 2
        let dk = |u: f64| C::new(-0.5 / (0.5 * (u - u0)).sinh().powi(2), 0.0);
        acc -= endpoint_correction(rule, dk, g0);
        acc += g0 * (pv_coth_integral(rule.half_width, u0) + s * 2.0 * PI * I);
    }
    acc
}

impl TwistorFunctionGrid {
    pub fn rank(&self) -> usize {
        self.central.len()
    }

    pub fn zeta_node(&self, r: usize, i: usize) -> C {
        self.rays[r].direction * self.rule.nodes[i].exp()
    }

    /// `eta_j` of charge `j` on ray `r` at node `i`.
    pub fn eta_node(&self, r: usize, j: usize, i: usize) -> C {
        let ray = &self.rays[r];
        eta_sf(ray.z[j], ray.psi[j], self.zeta_node(r, i)) + ray.inst[j][i]
    }

    fn refresh_logs(&mut self) -> Result<()> {
        for r in 0..self.rays.len() {
            let logs = (0..self.rays[r].charges.len())
                .map(|j| {
                    (0..self.rule.len())
                        .map(|i| log_one_minus(self.rays[r].sigmas[j], self.eta_node(r, j, i)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            self.rays[r].log_values = logs;
        }
        Ok(())
    }

    /// `max |X|` over all nodes.
    pub fn max_abs_x(&self) -> f64 {
        let mut best = 0.0_f64;
        for (r, ray) in self.rays.iter().enumerate() {
            for j in 0..ray.charges.len() {
                for i in 0..self.rule.len() {
                    best = best.max((I * self.eta_node(r, j, i)).exp().norm());
                }
            }
        }
        best
    }

    pub fn sup_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }

    pub fn report(&self) -> SolverReport {
        SolverReport {
            iterations: self.iterations,
            residual_history: self.residual_history.clone(),
            per_ray_node_counts: self.rays.iter().map(|r| r.charges.len() * self.rule.len()).collect(),
        }
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string(&self.report()).expect("report serialises")
    }

    /// `max |inst_{-g}(-1/conj zeta) + conj inst_g(zeta)|` over all charges
    /// whose CPT partner is present.
    pub fn antipodal_residual(&self) -> f64 {
        let n = self.rule.len();
        let mut worst = 0.0_f64;
        for ray in &self.rays {
            for (j, g) in ray.charges.iter().enumerate() {
                let ng = -g;
                for other in &self.rays {
                    if let Some(k) = other.charges.iter().position(|c| *c == ng) {
                        for i in 0..n {
                            let d = other.inst[k][n - 1 - i] + ray.inst[j][i].conj();
                            worst = worst.max(d.norm());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Charges with nonzero `<gamma, gamma_k> Omega_k / 4 pi` on ray `r`.
    fn couplings(&self, gamma: &Charge, r: usize) -> Result<Vec<(usize, f64)>> {
        let ray = &self.rays[r];
        let mut out = Vec::new();
        for (k, g) in ray.charges.iter().enumerate() {
            let p = self.lattice.pairing(gamma, g)?;
            if p != 0 {
                out.push((k, p as f64 * ray.omegas[k] as f64 / (4.0 * PI)));
            }
        }
        Ok(out)
    }

    fn eval(&self, gamma: &Charge, zeta: C, excluded: &[bool], on_ray: Option<(usize, f64)>) -> Result<C> {
        let mut val = eta_sf(charge_z(&self.central, gamma), charge_psi(&self.psi, gamma), zeta);
        let rule = &self.rule;
        for (r, ray) in self.rays.iter().enumerate() {
            if excluded[r] {
                continue;
            }
            let pairs = self.couplings(gamma, r)?;
            if pairs.is_empty() {
                continue;
            }
            let w = zeta / ray.direction;
            let side = on_ray.filter(|(rr, _)| *rr == r).map(|(_, s)| s);
            let ang = w.arg();
            if side.is_none() && ang.abs() < 0.5 * PI && ang.sin().abs() < RAY_GUARD {
                return Err(Error::RayProximity(ang.abs()));
            }
            let near = side.is_some() || ang.abs() < SUBTRACT_WINDOW;
            if near && ray.is_bundle() {
                let first = ray.positions[pairs[0].0];
                if pairs.iter().any(|&(k, _)| ray.positions[k] != first) {
                    return Err(Error::RayProximity(ang.abs()));
                }
            }
            let mut excl = excluded.to_vec();
            excl[r] = true;
            for &(k, c) in &pairs {
                let g = &ray.log_values[k];
                let contrib = if near {
                    let e0 = self.eval(&ray.charges[k], zeta, &excl, on_ray)?;
                    let g0 = log_one_minus(ray.sigmas[k], e0)?;
                    match side {
                        Some(s) => side_sum(rule, g, w.norm().ln(), g0, s),
                        None => {
                            let mut acc = ZERO;
                            for (l, (&u, &wt)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
                                let e = u.exp();
                                acc += wt * (e + w) / (e - w) * (g[l] - g0);
                            }
                            acc - endpoint_correction(rule, |u| kernel_derivative(u, w), g0)
                                + g0 * kernel_integral(rule.half_width, w)
                        }
                    }
                } else {
                    let mut acc = ZERO;
                    for (l, (&u, &wt)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
                        let e = u.exp();
                        acc += wt * (e + w) / (e - w) * g[l];
                    }
                    acc
                };
                val += c * contrib;
            }
        }
        Ok(val)
    }

    /// Side limit of `eta_gamma` at `zeta` on ray `r`: `s = +1` counterclockwise.
    pub fn eta_on_ray(&self, gamma: &Charge, r: usize, modulus: f64, s: f64) -> Result<C> {
        if r >= self.rays.len() || !(modulus > 0.0) {
            return Err(Error::Domain(format!("bad ray index {r} or modulus {modulus}")));
        }
        if self.rays[r].is_bundle() {
            return Err(Error::Wall("side limits on a wall bundle are not supported".into()));
        }
        let zeta = self.rays[r].direction * modulus;
        self.eval(gamma, zeta, &vec![false; self.rays.len()], Some((r, s.signum())))
    }
}

/// Grid with one ray per distinct direction `-i Z_gamma / |Z_gamma|`.
pub fn build_ray_system(
    lat: &SymplecticLattice,
    stab: &StabilityData,
    pt: &FiberPoint,
    rule: &QuadratureRule,
) -> Result<TwistorFunctionGrid> {
    build(lat, stab, pt, rule, None)
}

/// As `build_ray_system`, but non-proportional charges on a common ray are
/// allowed and ordered by tilting `Z_a -> Z_a e^{i t_a eps}`.
pub fn build_ray_system_on_wall(
    lat: &SymplecticLattice,
    stab: &StabilityData,
    pt: &FiberPoint,
    rule: &QuadratureRule,
    tilt: &[f64],
) -> Result<TwistorFunctionGrid> {
    build(lat, stab, pt, rule, Some(tilt))
}

fn build(
    lat: &SymplecticLattice,
    stab: &StabilityData,
    pt: &FiberPoint,
    rule: &QuadratureRule,
    tilt: Option<&[f64]>,
) -> Result<TwistorFunctionGrid> {
    let rank = lat.rank;
    if stab.rank() != rank {
        return Err(Error::RankMismatch { expected: rank, found: stab.rank() });
    }
    if pt.psi.len() != rank {
        return Err(Error::RankMismatch { expected: rank, found: pt.psi.len() });
    }
    let central: Vec<C> = stab.central_charge.iter().map(|z| z * stab.scale).collect();
    let mut rays: Vec<RayGrid> = Vec::new();
    for (g, o) in stab.support() {
        let zg = charge_z(&central, g);
        if zg.norm() == 0.0 {
            return Err(Error::Domain(format!("Z vanishes for support charge {:?}", g.0)));
        }
        let d = -I * zg / zg.norm();
        let idx = match rays.iter().position(|r| (d / r.direction).arg().abs() < 1e-9) {
            Some(k) => k,
            None => {
                rays.push(RayGrid {
                    direction: d,
                    charges: vec![],
                    omegas: vec![],
                    sigmas: vec![],
                    z: vec![],
                    psi: vec![],
                    positions: vec![],
                    inst: vec![],
                    log_values: vec![],
                });
                rays.len() - 1
            }
        };
        let ray = &mut rays[idx];
        ray.charges.push(g.clone());
        ray.omegas.push(o);
        ray.sigmas.push(sigma(g) as f64);
        ray.z.push(zg);
        ray.psi.push(charge_psi(&pt.psi, g));
        ray.positions.push(0);
        ray.inst.push(vec![ZERO; rule.len()]);
    }
    for ray in &mut rays {
        let k = ray.charges.len();
        let mixed = (0..k).any(|a| (a + 1..k).any(|b| !ray.charges[a].is_proportional(&ray.charges[b])));
        if !mixed {
            continue;
        }
        let Some(t) = tilt else {
            let (a, b) = (0..k)
                .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
                .find(|&(a, b)| !ray.charges[a].is_proportional(&ray.charges[b]))
                .expect("mixed ray has a non-proportional pair");
            return Err(Error::Wall(format!(
                "charges {:?} and {:?} have parallel central charges",
                ray.charges[a].0, ray.charges[b].0
            )));
        };
        if t.len() != rank {
            return Err(Error::RankMismatch { expected: rank, found: t.len() });
        }
        let angles: Vec<f64> = ray
            .charges
            .iter()
            .map(|g| {
                let zt: C = g
                    .0
                    .iter()
                    .zip(&stab.central_charge)
                    .zip(t)
                    .map(|((&q, z), &ta)| z * C::from_polar(q as f64, TILT * ta))
                    .sum();
                (-I * zt / ray.direction).arg()
            })
            .collect();
        let mut distinct: Vec<f64> = Vec::new();
        let mut sorted = angles.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for a in sorted {
            if distinct.last().is_none_or(|&l| (a - l).abs() > 1e-9) {
                distinct.push(a);
            }
        }
        for (j, a) in angles.iter().enumerate() {
            ray.positions[j] = distinct.iter().position(|d| (d - a).abs() <= 1e-9).expect("angle listed");
        }
        for a in 0..k {
            for b in a + 1..k {
                if ray.positions[a] == ray.positions[b] && !ray.charges[a].is_proportional(&ray.charges[b]) {
                    return Err(Error::Wall("tilt does not separate the wall bundle".into()));
                }
            }
        }
    }
    rays.sort_by(|a, b| a.direction.arg().partial_cmp(&b.direction.arg()).unwrap());
    let mut grid = TwistorFunctionGrid {
        lattice: lat.clone(),
        rule: rule.clone(),
        central,
        psi: pt.psi.clone(),
        rays,
        iterations: 0,
        residual_history: vec![],
    };
    grid.refresh_logs()?;
    Ok(grid)
}

/// Toeplitz kernels and couplings reused across iterations.
struct Kernels {
    /// `cross[r][r'][l - i + n - 1]` for `r != r'`.
    cross: Vec<Vec<Vec<C>>>,
    /// `coupling[r][j][r'][k] = <g_rj, g_r'k> Omega / 4 pi`.
    coupling: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Kernels {
    fn new(grid: &TwistorFunctionGrid) -> Result<Self> {
        let n = grid.rule.len();
        let h = grid.rule.step();
        let nr = grid.rays.len();
        let mut cross = vec![vec![Vec::new(); nr]; nr];
        for r in 0..nr {
            for rp in 0..nr {
                if r == rp {
                    continue;
                }
                let rho = grid.rays[rp].direction / grid.rays[r].direction;
                cross[r][rp] = (0..2 * n - 1)
                    .map(|t| {
                        let e = rho * ((t as f64 - (n - 1) as f64) * h).exp();
                        (e + 1.0) / (e - 1.0)
                    })
                    .collect();
            }
        }
        let mut coupling = Vec::with_capacity(nr);
        for ray in &grid.rays {
            let mut per_j = Vec::new();
            for g in &ray.charges {
                let mut per_r = Vec::new();
                for other in &grid.rays {
                    let v = other
                        .charges
                        .iter()
                        .zip(&other.omegas)
                        .map(|(gk, &o)| Ok(grid.lattice.pairing(g, gk)? as f64 * o as f64 / (4.0 * PI)))
                        .collect::<Result<Vec<_>>>()?;
                    per_r.push(v);
                }
                per_j.push(per_r);
            }
            coupling.push(per_j);
        }
        Ok(Self { cross, coupling })
    }
}

/// New instanton parts from the current logarithms.
fn picard_update(grid: &TwistorFunctionGrid, ker: &Kernels) -> Vec<Vec<Vec<C>>> {
    let n = grid.rule.len();
    let w = &grid.rule.weights;
    let nr = grid.rays.len();
    let mut out = Vec::with_capacity(nr);
    for r in 0..nr {
        let ray = &grid.rays[r];
        // conv[r'][k][i] = sum_l K(u_l - u_i) w_l g_l
        let mut conv: Vec<Vec<Option<Vec<C>>>> = vec![Vec::new(); nr];
        for rp in 0..nr {
            if rp == r {
                continue;
            }
            let other = &grid.rays[rp];
            conv[rp] = (0..other.charges.len())
                .map(|k| {
                    let used = (0..ray.charges.len()).any(|j| ker.coupling[r][j][rp][k] != 0.0);
                    used.then(|| {
                        let g = &other.log_values[k];
                        let t = &ker.cross[r][rp];
                        (0..n).map(|i| (0..n).map(|l| t[l + n - 1 - i] * w[l] * g[l]).sum()).collect()
                    })
                })
                .collect();
        }
        let mut new_ray = Vec::with_capacity(ray.charges.len());
        for j in 0..ray.charges.len() {
            let mut vals = vec![ZERO; n];
            for rp in 0..nr {
                if rp == r {
                    continue;
                }
                for (k, c) in ker.coupling[r][j][rp].iter().enumerate() {
                    if *c == 0.0 {
                        continue;
                    }
                    let cv = conv[rp][k].as_ref().expect("coupled convolution computed");
                    for i in 0..n {
                        vals[i] += *c * cv[i];
                    }
                }
            }
            for (k, c) in ker.coupling[r][j][r].iter().enumerate() {
                if *c == 0.0 || ray.positions[k] == ray.positions[j] {
                    continue;
                }
                let s = if ray.positions[j] > ray.positions[k] { 1.0 } else { -1.0 };
                let g = &ray.log_values[k];
                for i in 0..n {
                    vals[i] += *c * side_sum(&grid.rule, g, grid.rule.nodes[i], g[i], s);
                }
            }
            new_ray.push(vals);
        }
        out.push(new_ray);
    }
    out
}

fn step(grid: &TwistorFunctionGrid, ker: &Kernels, relaxation: f64) -> Result<(TwistorFunctionGrid, f64)> {
    let update = picard_update(grid, ker);
    let mut next = grid.clone();
    let mut residual = 0.0_f64;
    for (r, ray) in next.rays.iter_mut().enumerate() {
        for (j, vals) in ray.inst.iter_mut().enumerate() {
            for (i, v) in vals.iter_mut().enumerate() {
                let d = update[r][j][i] - *v;
                residual = residual.max(d.norm());
                *v += relaxation * d;
            }
        }
    }
    next.refresh_logs()?;
    next.iterations += 1;
    next.residual_history.push(residual);
    Ok((next, residual))
}

/// One Picard iteration.
pub fn tba_iterate(grid: &TwistorFunctionGrid) -> Result<(TwistorFunctionGrid, f64)> {
    step(grid, &Kernels::new(grid)?, 1.0)
}

/// Iterates from `grid` until the sup change of `ln X` drops below `tol`.
pub fn tba_solve_from(mut grid: TwistorFunctionGrid, opts: &SolverOptions) -> Result<TwistorFunctionGrid> {
    opts.validate()?;
    let ker = Kernels::new(&grid)?;
    for _ in 0..opts.max_iter {
        let (next, res) = step(&grid, &ker, opts.relaxation)?;
        grid = next;
        if res < opts.tol {
            return Ok(grid);
        }
    }
    Err(Error::NonConvergence { history: grid.residual_history })
}

pub fn tba_solve(
    lat: &SymplecticLattice,
    stab: &StabilityData,
    pt: &FiberPoint,
    rule: &QuadratureRule,
    opts: &SolverOptions,
) -> Result<TwistorFunctionGrid> {
    tba_solve_from(build_ray_system(lat, stab, pt, rule)?, opts)
}

/// `eta_gamma(zeta)` by the direct kernel integral; `zeta` must be off all rays.
pub fn eta_arctic(grid: &TwistorFunctionGrid, gamma: &Charge, zeta: C) -> Result<C> {
    if gamma.rank() != grid.rank() {
        return Err(Error::RankMismatch { expected: grid.rank(), found: gamma.rank() });
    }
    if !(zeta.norm() > 0.0) || !zeta.is_finite() {
        return Err(Error::Domain("eta needs a finite nonzero zeta".into()));
    }
    grid.eval(gamma, zeta, &vec![false; grid.rays.len()], None)
}

/// Semi-flat data and instanton coefficients `I_{gamma^a, n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaurentData {
    pub n_max: usize,
    pub central: Vec<C>,
    pub psi: Vec<f64>,
    /// `coeffs[a][n + n_max] = I_{gamma^a, n}`.
    pub coeffs: Vec<Vec<C>>,
    /// `max |conj I_n - (-1)^n I_{-n}|`.
    pub reality_residual: f64,
}

impl LaurentData {
    pub fn i_coeff(&self, a: usize, n: i32) -> C {
        self.coeffs[a][(n + self.n_max as i32) as usize]
    }

    pub fn i_charge(&self, gamma: &Charge, n: i32) -> C {
        gamma.0.iter().enumerate().map(|(a, &q)| self.i_coeff(a, n) * q as f64).sum()
    }

    /// Coefficient of `zeta^{-k}` in `eta_{gamma^a}` near `zeta = 0`.
    pub fn eta_coefficient(&self, a: usize, k: i32) -> C {
        match k {
            1 => self.central[a],
            0 => self.psi[a] + 0.5 * I * self.i_coeff(a, 0),
            -1 => -self.central[a].conj() + I * self.i_coeff(a, -1),
            k if k < -1 && -k <= self.n_max as i32 => I * self.i_coeff(a, k),
            _ => ZERO,
        }
    }

    /// Truncated series for `eta_gamma(zeta)`.
    pub fn eta_series(&self, gamma: &Charge, zeta: C) -> C {
        let z = charge_z(&self.central, gamma);
        let mut v = eta_sf(z, charge_psi(&self.psi, gamma), zeta) + 0.5 * I * self.i_charge(gamma, 0);
        for n in 1..=self.n_max as i32 {
            v += I * self.i_charge(gamma, -n) * zeta.powi(n);
        }
        v
    }
}

pub fn laurent_coeffs(grid: &TwistorFunctionGrid, n_max: usize) -> Result<LaurentData> {
    let rank = grid.rank();
    let nm = n_max as i32;
    let mut coeffs = vec![vec![ZERO; 2 * n_max + 1]; rank];
    for ray in &grid.rays {
        for (k, g) in ray.charges.iter().enumerate() {
            let p = grid.lattice.pairing_with_basis(g)?;
            let logs = &ray.log_values[k];
            for n in -nm..=nm {
                let s: C = grid
                    .rule
                    .nodes
                    .iter()
                    .zip(&grid.rule.weights)
                    .zip(logs)
                    .map(|((&u, &w), l)| w * (ray.direction * u.exp()).powi(n) * l)
                    .sum();
                let s = s * ray.omegas[k] as f64 / (2.0 * PI * I);
                for a in 0..rank {
                    if p[a] != 0 {
                        // <gamma^a, g> = -<g, gamma^a>
                        coeffs[a][(n + nm) as usize] -= s * p[a] as f64;
                    }
                }
            }
        }
    }
    let mut reality_residual = 0.0_f64;
    for row in &coeffs {
        for n in -nm..=nm {
            let sgn = if n % 2 == 0 { 1.0 } else { -1.0 };
            let d = row[(n + nm) as usize].conj() - sgn * row[(nm - n) as usize];
            reality_residual = reality_residual.max(d.norm());
        }
    }
    Ok(LaurentData { n_max, central: grid.central.clone(), psi: grid.psi.clone(), coeffs, reality_residual })
}

fn eps_lower(lat: &SymplecticLattice) -> DMatrix<f64> {
    lat.eps_lower()
}

/// `mu_N = eps_ab (i Z_a conj Z_b + Z_a I_{b,-1})`.
pub fn mu_n(lat: &SymplecticLattice, lau: &LaurentData) -> C {
    let e = eps_lower(lat);
    let mut s = ZERO;
    for a in 0..lat.rank {
        for b in 0..lat.rank {
            if e[(a, b)] != 0.0 {
                s += e[(a, b)] * lau.central[a] * (I * lau.central[b].conj() + lau.i_coeff(b, -1));
            }
        }
    }
    s
}

/// `phi_+ = eps_ab (-i Z_a psi_b + Z_a I_{b,0} / 2)`.
pub fn phi_plus_inst(lat: &SymplecticLattice, lau: &LaurentData) -> C {
    let e = eps_lower(lat);
    let mut s = ZERO;
    for a in 0..lat.rank {
        for b in 0..lat.rank {
            if e[(a, b)] != 0.0 {
                s += e[(a, b)] * lau.central[a] * (-I * lau.psi[b] + 0.5 * lau.i_coeff(b, 0));
            }
        }
    }
    s
}

/// `L^inst_{psi_c} = -eps_ca I_{a,0}`.
pub fn l_psi_inst(lat: &SymplecticLattice, lau: &LaurentData) -> Vec<f64> {
    let e = eps_lower(lat);
    (0..lat.rank).map(|c| -(0..lat.rank).map(|a| e[(c, a)] * lau.i_coeff(a, 0).re).sum::<f64>()).collect()
}

/// `mu^sf + (1/4 pi i) sum Omega int dzeta/zeta (Z/zeta - conj(Z) zeta) ln(1 - X)`.
pub fn mu_integral(grid: &TwistorFunctionGrid) -> C {
    let c = &grid.central;
    let m = c.len() / 2;
    let mut mu = C::new(-2.0 * (0..m).map(|a| (c[m + a].conj() * c[a]).im).sum::<f64>(), 0.0);
    for (r, ray) in grid.rays.iter().enumerate() {
        for k in 0..ray.charges.len() {
            let s: C = (0..grid.rule.len())
                .map(|i| {
                    let zeta = grid.zeta_node(r, i);
                    grid.rule.weights[i] * (ray.z[k] / zeta - ray.z[k].conj() * zeta) * ray.log_values[k][i]
                })
                .sum();
            mu += s * ray.omegas[k] as f64 / (4.0 * PI * I);
        }
    }
    mu
}

/// Inputs shared by every point-wise TBA computation.
#[derive(Debug, Clone)]
pub struct TbaProblem {
    pub lattice: SymplecticLattice,
    pub prepotential: Prepotential,
    pub spectrum: BTreeMap<Charge, u32>,
    pub scale: f64,
    pub rule: QuadratureRule,
    pub options: SolverOptions,
    pub n_max: usize,
    /// Ordering tilt for points on a wall.
    pub wall_tilt: Option<Vec<f64>>,
    /// Relative step of the outer stencil in `stencil_invariants`.
    pub fd_scale: f64,
}

/// Indices of the Laurent orders used for the frame: `zeta^{1}` down to `zeta^{-3}`.
const ETA_ORDERS: [i32; 5] = [1, 0, -1, -2, -3];

impl TbaProblem {
    pub fn new(
        lattice: SymplecticLattice,
        prepotential: Prepotential,
        spectrum: BTreeMap<Charge, u32>,
        scale: f64,
    ) -> Result<Self> {
        if prepotential.m() * 2 != lattice.rank {
            return Err(Error::RankMismatch { expected: lattice.rank, found: 2 * prepotential.m() });
        }
        Ok(Self {
            lattice,
            prepotential,
            spectrum,
            scale,
            rule: QuadratureRule::default(),
            options: SolverOptions::default(),
            n_max: 6,
            wall_tilt: None,
            fd_scale: 1e-3,
        })
    }

    pub fn with_rule(mut self, rule: QuadratureRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_wall_tilt(mut self, tilt: Vec<f64>) -> Self {
        self.wall_tilt = Some(tilt);
        self
    }

    pub fn m(&self) -> usize {
        self.lattice.m()
    }

    pub fn stability(&self, z: &[C]) -> Result<StabilityData> {
        StabilityData::new(semiflat_central_charges(&self.prepotential, z)?, self.spectrum.clone(), self.scale)
    }

    pub fn build(&self, pt: &FiberPoint) -> Result<TwistorFunctionGrid> {
        let stab = self.stability(&pt.z)?;
        match &self.wall_tilt {
            Some(t) => build_ray_system_on_wall(&self.lattice, &stab, pt, &self.rule, t),
            None => build_ray_system(&self.lattice, &stab, pt, &self.rule),
        }
    }

    pub fn solve(&self, pt: &FiberPoint) -> Result<TwistorFunctionGrid> {
        tba_solve_from(self.build(pt)?, &self.options)
    }

    /// Solves at `pt`, starting from the instanton parts of `warm` when the
    /// ray structure matches.
    pub fn solve_warm(&self, pt: &FiberPoint, warm: Option<&TwistorFunctionGrid>, tol: f64) -> Result<TwistorFunctionGrid> {
        let mut grid = self.build(pt)?;
        if let Some(w) = warm {
            let same = w.rays.len() == grid.rays.len()
                && w.rule == grid.rule
                && w.rays.iter().zip(&grid.rays).all(|(a, b)| a.charges == b.charges);
            if same {
                for (a, b) in grid.rays.iter_mut().zip(&w.rays) {
                    a.inst = b.inst.clone();
                }
                grid.refresh_logs()?;
            }
        }
        let opts = SolverOptions { tol, ..self.options };
        tba_solve_from(grid, &opts)
    }

    pub fn laurent(&self, pt: &FiberPoint) -> Result<(TwistorFunctionGrid, LaurentData)> {
        let grid = self.solve(pt)?;
        let lau = laurent_coeffs(&grid, self.n_max)?;
        Ok((grid, lau))
    }

    fn observables(&self, lau: &LaurentData) -> Vec<C> {
        let mut v = Vec::new();
        for a in 0..self.lattice.rank {
            for &k in &ETA_ORDERS {
                v.push(lau.eta_coefficient(a, k));
            }
        }
        v.push(mu_n(&self.lattice, lau));
        v.push(phi_plus_inst(&self.lattice, lau));
        v.extend(l_psi_inst(&self.lattice, lau).into_iter().map(|x| C::new(x, 0.0)));
        v
    }

    /// Observables at a real-frame point, warm-started from `warm`.
    fn observables_at(&self, y: &[f64], warm: &TwistorFunctionGrid) -> Result<Vec<C>> {
        let pt = FiberPoint::from_real(y)?;
        let grid = self.solve_warm(&pt, Some(warm), STENCIL_TOL.min(self.options.tol))?;
        Ok(self.observables(&laurent_coeffs(&grid, self.n_max.max(3))?))
    }
}

/// Potentials from the Laurent data at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMaps {
    pub mu: f64,
    pub mu_n: C,
    pub phi_plus: C,
    pub phi_plus_plus: C,
    /// Standard deviation of `Im mu_N` over `pt` and eight nearby points.
    pub consistency_residual: f64,
}

pub fn moment_maps(problem: &TbaProblem, pt: &FiberPoint) -> Result<MomentMaps> {
    let (grid, lau) = problem.laurent(pt)?;
    let x = pt.to_real();
    let mn = mu_n(&problem.lattice, &lau);
    let m = problem.m();
    let mut ims = vec![mn.im];
    for &i in &[0, m, 2 * m, 4 * m - 1] {
        for s in [-1.0, 1.0] {
            let mut y = x.clone();
            y[i] += 0.05 * s;
            let g = problem.solve_warm(&FiberPoint::from_real(&y)?, Some(&grid), problem.options.tol)?;
            ims.push(mu_n(&problem.lattice, &laurent_coeffs(&g, problem.n_max)?).im);
        }
    }
    let mean = ims.iter().sum::<f64>() / ims.len() as f64;
    let var = ims.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ims.len() as f64;
    Ok(MomentMaps {
        mu: mn.re,
        mu_n: mn,
        phi_plus: phi_plus_inst(&problem.lattice, &lau),
        phi_plus_plus: problem.scale * problem.scale * phi_plus_plus(&problem.prepotential, &x)?,
        consistency_residual: var.sqrt(),
    })
}

/// Forms, potentials and their differentials at one point, from a single
/// finite-difference sweep of the solver.
#[derive(Debug, Clone)]
pub struct InstantonGeometry {
    pub x: Vec<f64>,
    pub grid: TwistorFunctionGrid,
    pub laurent: LaurentData,
    pub omega_plus: FormMatrix,
    pub omega_zero: FormMatrix,
    pub omega_minus: FormMatrix,
    /// `w_{-2}` from the truncated convolution; vanishes for the exact solution.
    pub omega_minus_two: FormMatrix,
    pub mu: f64,
    pub mu_n: C,
    pub phi_plus: C,
    pub phi_plus_plus: C,
    pub d_mu: Covector,
    pub d_phi_plus: Covector,
    pub d_phi_plus_plus: Covector,
    pub theta_plus: Covector,
    /// Symmetrised `L^inst_{psi psi}`.
    pub l_psipsi: DMatrix<f64>,
}

fn max_abs(m: &DMatrix<C>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn instanton_geometry(problem: &TbaProblem, pt: &FiberPoint) -> Result<InstantonGeometry> {
    let rank = problem.lattice.rank;
    let m = problem.m();
    let n = 4 * m;
    let x = pt.to_real();
    let grid = problem.solve_warm(pt, None, STENCIL_TOL.min(problem.options.tol))?;
    let lau = laurent_coeffs(&grid, problem.n_max.max(3))?;
    let center = problem.observables(&lau);
    let p = fd_partials(|y| problem.observables_at(y, &grid), &x)?;
    let col = |idx: usize| Covector::from_iterator(n, (0..n).map(|i| p[i][idx]));
    let no = ETA_ORDERS.len();
    let d_eta: Vec<Vec<Covector>> = (0..rank).map(|a| (0..no).map(|k| col(a * no + k)).collect()).collect();
    let e = problem.lattice.eps_lower();
    // w_m = 1/2 eps_ab sum_k d eta_{a,k} ^ d eta_{b,m-k}
    let omega = |mm: i32| -> FormMatrix {
        let mut w = FormMatrix::zeros(n, n);
        for a in 0..rank {
            for b in 0..rank {
                if e[(a, b)] == 0.0 {
                    continue;
                }
                for (ka, &k) in ETA_ORDERS.iter().enumerate() {
                    if let Some(kb) = ETA_ORDERS.iter().position(|&l| l == mm - k) {
                        w += wedge(&d_eta[a][ka], &d_eta[b][kb]) * C::new(0.5 * e[(a, b)], 0.0);
                    }
                }
            }
        }
        w
    };
    let base = rank * no;
    let mn = center[base];
    let d_mu = col(base).map(|c| C::new(c.re, 0.0));
    let d_phi_plus = col(base + 1);
    let mut l_psipsi = DMatrix::from_fn(rank, rank, |c, d| p[2 * m + d][base + 2 + c].re);
    l_psipsi = (&l_psipsi + l_psipsi.transpose()) * 0.5;
    let r2 = problem.scale * problem.scale;
    let prep = &problem.prepotential;
    let d_phi_plus_plus = gradient(|y| Ok(r2 * phi_plus_plus(prep, y)?), &x)?;
    // theta_+ = R u_A dz^A with u_A = psi~_A - F_AB v^B + (i/2) I_{A,0}, v^B = psi^B + (i/2) I_{m+B,0}
    let fab = prep.eval(&pt.z)?.fab;
    let mut theta_plus = Covector::zeros(n);
    for a in 0..m {
        let mut u = pt.psi[a] + 0.5 * I * lau.i_coeff(a, 0);
        for b in 0..m {
            u -= fab[(a, b)] * (pt.psi[m + b] + 0.5 * I * lau.i_coeff(m + b, 0));
        }
        theta_plus += dz(m, a) * (u * problem.scale);
    }
    Ok(InstantonGeometry {
        omega_plus: omega(1),
        omega_zero: omega(0),
        omega_minus: omega(-1),
        omega_minus_two: omega(-2),
        mu: mn.re,
        mu_n: mn,
        phi_plus: center[base + 1],
        phi_plus_plus: r2 * phi_plus_plus(prep, &x)?,
        d_mu,
        d_phi_plus,
        d_phi_plus_plus,
        theta_plus,
        l_psipsi,
        x,
        grid,
        laurent: lau,
    })
}

impl InstantonGeometry {
    pub fn frame(&self) -> Result<FrameData> {
        FrameData::from_forms(self.omega_plus.clone(), self.omega_zero.clone(), self.omega_minus.clone())
    }

    /// `|w_- + conj w_+|`.
    pub fn reality_residual(&self) -> f64 {
        max_abs(&(&self.omega_minus + self.omega_plus.map(|c| c.conj())))
    }

    pub fn truncation_residual(&self) -> f64 {
        max_abs(&self.omega_minus_two)
    }

    /// Generators `X_f = eps_hat^{ab} d_{psi_a} f d_{psi_b}` with
    /// `X_+ = X_{phi_+}`, `X_0 = X_mu`, `X_- = -conj X_+`, and the residuals
    /// of the five generalized moment-map equations, ordered `n = -2..=2`.
    pub fn twisted_generators(&self, lat: &SymplecticLattice) -> Result<TwistedGenerators> {
        let rank = lat.rank;
        let m = rank / 2;
        let n = 4 * m;
        let lpp = &self.l_psipsi;
        let eps_hat = lat.eps_lower() + lpp * lat.eps_upper() * lpp * 0.25;
        let sv = eps_hat.singular_values();
        if !(sv.min() > 0.0) || sv.max() / sv.min() > MAX_CONDITION {
            return Err(Error::SingularForm(format!("eps_hat: condition number {:.3e}", sv.max() / sv.min())));
        }
        let inv = eps_hat.clone().try_inverse().ok_or_else(|| Error::SingularForm("eps_hat".into()))?;
        let field = |df: &Covector| -> DVector<C> {
            let mut v = DVector::zeros(n);
            for b in 0..rank {
                v[2 * m + b] = (0..rank).map(|a| df[2 * m + a] * inv[(a, b)]).sum();
            }
            v
        };
        let x_plus = field(&self.d_phi_plus);
        let x_zero = field(&self.d_mu);
        let x_minus = -x_plus.map(|c| c.conj());
        let gens = [x_plus.clone(), x_zero.clone(), x_minus.clone()];
        let lhs = crate::semiflat::moment_map_lhs(
            &gens,
            &(self.omega_plus.clone(), self.omega_zero.clone(), self.omega_minus.clone()),
        );
        let r1 = &self.d_phi_plus - &self.theta_plus * I;
        let c = |v: &Covector| v.map(|z| z.conj());
        let rhs = [c(&self.d_phi_plus_plus), -c(&r1), self.d_mu.clone(), r1.clone(), self.d_phi_plus_plus.clone()];
        let mut residuals = [0.0; 5];
        for k in 0..5 {
            residuals[k] = (&lhs[k] - &rhs[k]).iter().map(|z| z.norm()).fold(0.0, f64::max);
        }
        Ok(TwistedGenerators { x_plus, x_zero, x_minus, eps_hat, residuals })
    }

    /// `max |i_{X(zeta)} w(zeta) - dmu(zeta) + i zeta d/dzeta [dmu(zeta) I(zeta)]|`
    /// with `mu(zeta) = mu - phi_++ zeta^-2 - conj(phi_++) zeta^2`.
    pub fn quasi_moment_map_residual(&self, gens: &TwistedGenerators, zeta: C) -> Result<f64> {
        let frame = self.frame()?;
        let xz = &gens.x_plus / zeta + &gens.x_zero + &gens.x_minus * zeta;
        let wz = &self.omega_plus / zeta + &self.omega_zero + &self.omega_minus * zeta;
        let lhs = interior(&xz, &wz);
        // dmu(zeta) coefficients for powers -2..=2
        let dm: [(i32, Covector); 3] = [
            (-2, -&self.d_phi_plus_plus),
            (0, self.d_mu.clone()),
            (2, -self.d_phi_plus_plus.map(|c| c.conj())),
        ];
        let iz: [(i32, crate::geometry::Endomorphism); 3] =
            [(-1, frame.i_plus()), (0, frame.i3.clone()), (1, frame.i_minus())];
        let n = lhs.len();
        let mut rhs = Covector::zeros(n);
        for (p, v) in &dm {
            rhs += v * zeta.powi(*p);
            for (q, e) in &iz {
                let k = p + q;
                rhs -= (v * e) * (I * k as f64 * zeta.powi(k));
            }
        }
        Ok((&lhs - &rhs).iter().map(|z| z.norm()).fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwistedGenerators {
    pub x_plus: DVector<C>,
    pub x_zero: DVector<C>,
    pub x_minus: DVector<C>,
    pub eps_hat: DMatrix<f64>,
    pub residuals: [f64; 5],
}

pub fn instanton_frame(problem: &TbaProblem, pt: &FiberPoint) -> Result<FrameData> {
    instanton_geometry(problem, pt)?.frame()
}

pub fn twisted_generators(problem: &TbaProblem, pt: &FiberPoint) -> Result<TwistedGenerators> {
    instanton_geometry(problem, pt)?.twisted_generators(&problem.lattice)
}

/// `max_a |(-i zeta d/dzeta + X(zeta)) eta_{gamma^a}(zeta)|`.
pub fn diff_eq_residual(problem: &TbaProblem, geo: &InstantonGeometry, gens: &TwistedGenerators, zeta: C) -> Result<f64> {
    let rank = problem.lattice.rank;
    let m = rank / 2;
    let basis: Vec<Charge> = (0..rank).map(|a| Charge::basis(rank, a)).collect();
    let etas = |grid: &TwistorFunctionGrid, z: C| -> Result<Vec<C>> {
        basis.iter().map(|g| eta_arctic(grid, g, z)).collect()
    };
    // zeta d/dzeta in the logarithmic variable, one Richardson level
    let log_diff = |h: f64| -> Result<Vec<C>> {
        let p = etas(&geo.grid, zeta * h.exp())?;
        let q = etas(&geo.grid, zeta * (-h).exp())?;
        Ok(p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    };
    let (c1, c2) = (log_diff(2e-3)?, log_diff(1e-3)?);
    let zd: Vec<C> = c2.iter().zip(&c1).map(|(f, c)| (4.0 * f - c) / 3.0).collect();
    let psi0 = geo.x[2 * m..].to_vec();
    let dpsi = fd_partials(
        |p| {
            let mut y = geo.x.clone();
            y[2 * m..].copy_from_slice(p);
            let g = problem.solve_warm(&FiberPoint::from_real(&y)?, Some(&geo.grid), STENCIL_TOL)?;
            etas(&g, zeta)
        },
        &psi0,
    )?;
    let xz: Vec<C> = (0..rank)
        .map(|b| gens.x_plus[2 * m + b] / zeta + gens.x_zero[2 * m + b] + gens.x_minus[2 * m + b] * zeta)
        .collect();
    Ok((0..rank)
        .map(|a| {
            let flow: C = (0..rank).map(|b| xz[b] * dpsi[b][a]).sum();
            (-I * zd[a] + flow).norm()
        })
        .fold(0.0, f64::max))
}

/// Residuals that need derivatives of the geometry itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StencilInvariants {
    /// `L_{X_{n-1}} w_+ + L_{X_n} w_0 + L_{X_{n+1}} w_- + i n w_n` for `n = 0, 1, 2`.
    pub twisted_rotation: [f64; 3],
    /// Hyper-(1,1) residuals of `sigma_0 = w_0 + d(dmu I_0)` and `sigma_+ = w_+ + d(dmu I_+)`.
    pub hyper11_zero: f64,
    pub hyper11_plus: f64,
}

/// Differentiates the geometry over a stencil; the solver is re-run at
/// every point of every inner stencil.
pub fn stencil_invariants(problem: &TbaProblem, pt: &FiberPoint) -> Result<StencilInvariants> {
    let x = pt.to_real();
    let n = x.len();
    let pack = |g: &InstantonGeometry| -> Result<Vec<C>> {
        let gens = g.twisted_generators(&problem.lattice)?;
        let frame = g.frame()?;
        let xs = [&gens.x_minus, &gens.x_zero, &gens.x_plus];
        let ws = [&g.omega_plus, &g.omega_zero, &g.omega_minus];
        let beta0 = interior(xs[0], ws[0]) + interior(xs[1], ws[1]) + interior(xs[2], ws[2]);
        let beta1 = interior(xs[1], ws[0]) + interior(xs[2], ws[1]);
        let beta2 = interior(xs[2], ws[0]);
        let a0 = &g.d_mu * &frame.i3;
        let ap = &g.d_mu * frame.i_plus();
        let mut v: Vec<C> = Vec::new();
        for w in ws {
            v.extend(w.iter().copied());
        }
        for b in [&beta0, &beta1, &beta2, &a0, &ap] {
            v.extend(b.iter().copied());
        }
        Ok(v)
    };
    let center_geo = instanton_geometry(problem, pt)?;
    let gens = center_geo.twisted_generators(&problem.lattice)?;
    let frame = center_geo.frame()?;
    let p = fd_partials_scaled(|y| pack(&instanton_geometry(problem, &FiberPoint::from_real(y)?)?), &x, problem.fd_scale)?;
    let nn = n * n;
    // column-major storage of 2-forms: w_jk at j + n k
    let dw = |slot: usize, i: usize, j: usize, k: usize| p[i][slot * nn + j + n * k];
    let three = |slot: usize, i: usize, j: usize, k: usize| dw(slot, i, j, k) + dw(slot, j, k, i) + dw(slot, k, i, j);
    let iota_d = |xv: &DVector<C>, slot: usize| -> FormMatrix {
        FormMatrix::from_fn(n, n, |j, k| (0..n).map(|i| xv[i] * three(slot, i, j, k)).sum())
    };
    let d1 = |off: usize| -> FormMatrix {
        let base = 3 * nn + off * n;
        FormMatrix::from_fn(n, n, |i, k| p[i][base + k] - p[k][base + i])
    };
    let (xm, x0, xp) = (&gens.x_minus, &gens.x_zero, &gens.x_plus);
    let r0 = d1(0) + iota_d(xm, 0) + iota_d(x0, 1) + iota_d(xp, 2);
    let r1 = d1(1) + iota_d(x0, 0) + iota_d(xp, 1) + &center_geo.omega_plus * I;
    let r2 = d1(2) + iota_d(xp, 0);
    let sigma0 = &center_geo.omega_zero + d1(3);
    let sigmap = &center_geo.omega_plus + d1(4);
    Ok(StencilInvariants {
        twisted_rotation: [max_abs(&r0), max_abs(&r1), max_abs(&r2)],
        hyper11_zero: hyper11_residual(&sigma0, &frame),
        hyper11_plus: hyper11_residual(&sigmap, &frame),
    })
}

/// Differences between two spectra at a point on a wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallDeltas {
    pub delta_mu: f64,
    pub delta_i0: f64,
    pub delta_frame: f64,
    /// `|ccw_product(left) - ccw_product(right)|` for the tilted spectra; zero for partners.
    pub partner_residual: f64,
}

fn omega_zero_only(problem: &TbaProblem, pt: &FiberPoint) -> Result<(LaurentData, FormMatrix)> {
    let g = instanton_geometry(problem, pt)?;
    Ok((g.laurent, g.omega_zero))
}

/// Ray jumps composed in the order a counterclockwise path meets the rays of
/// the half plane `(alpha - pi, alpha]`, the order the integral equation realises.
pub fn ccw_product(lat: &SymplecticLattice, stab: &StabilityData, alpha: f64, pt: &TorusPoint) -> Result<TorusPoint> {
    let mut cur = pt.clone();
    for (g, o) in ordered_factors(stab, alpha).into_iter().rev() {
        cur = ks_transform_pow(lat, &g, &cur, o as i64)?;
    }
    Ok(cur)
}

/// Compares `mu`, `I_{gamma^a,0}` and `w_0` computed with the two problems.
/// Both need a wall tilt; the tilts fix which side each spectrum belongs to.
pub fn wall_smoothness_check(left: &TbaProblem, right: &TbaProblem, pt: &FiberPoint) -> Result<WallDeltas> {
    let (Some(tl), Some(tr)) = (&left.wall_tilt, &right.wall_tilt) else {
        return Err(Error::Config("wall comparison needs a tilt on both problems".into()));
    };
    let sl = left.stability(&pt.z)?;
    let sr = right.stability(&pt.z)?;
    let tilted = |s: &StabilityData, t: &[f64]| -> Result<StabilityData> {
        let z = s.central_charge.iter().zip(t).map(|(z, &ta)| z * C::from_polar(1.0, 0.05 * ta)).collect();
        StabilityData::new(z, s.spectrum.clone(), s.scale)
    };
    let (tsl, tsr) = (tilted(&sl, tl)?, tilted(&sr, tr)?);
    // half plane centred on the common wall direction
    let zc = sl.central_charge.iter().find(|z| z.norm() > 0.0).copied().unwrap_or(C::new(1.0, 0.0));
    let wall_dir = sl
        .support()
        .map(|(g, _)| sl.z(g))
        .find(|z| (z / zc).arg().abs() < 0.5 * PI)
        .unwrap_or(zc);
    let torus = TorusPoint::new((0..left.lattice.rank).map(|a| C::from_polar(0.3, 0.7 + a as f64)).collect())?;
    let alpha = wall_dir.arg() + 0.5 * PI;
    let a = ccw_product(&left.lattice, &tsl, alpha, &torus)?;
    let b = ccw_product(&left.lattice, &tsr, alpha, &torus)?;
    let partner_residual =
        a.basis_values.iter().zip(&b.basis_values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    let (ll, wl) = omega_zero_only(left, pt)?;
    let (lr, wr) = omega_zero_only(right, pt)?;
    let delta_mu = (mu_n(&left.lattice, &ll).re - mu_n(&right.lattice, &lr).re).abs();
    let delta_i0 = (0..left.lattice.rank).map(|a| (ll.i_coeff(a, 0) - lr.i_coeff(a, 0)).norm()).fold(0.0, f64::max);
    Ok(WallDeltas { delta_mu, delta_i0, delta_frame: max_abs(&(wl - wr)), partner_residual })
}

/// Overlap on which a gluing function is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GluingSector {
    /// `V_T` with the northern patch.
    Arctic,
    /// `V_T` with the southern patch.
    Antarctic,
    /// The two tropical patches adjacent to ray `r`.
    Ray(usize),
}

/// `phi_{V_N}(zeta) = i f_G(eta_N)/zeta^2 + i eta~_{N,A} eta_N^A / zeta` with
/// `G(w) = R^2 F(w / R)`, `eta_N^A = zeta eta^A`, `eta~_N = eta~ - G_A(eta_N)/zeta`.
pub fn arctic_potential(problem: &TbaProblem, grid: &TwistorFunctionGrid, zeta: C) -> Result<C> {
    let (etat, eta) = magnetic_electric(grid, zeta)?;
    let m = problem.m();
    let r = problem.scale;
    let w: Vec<C> = eta.iter().map(|e| zeta * e / r).collect();
    let v = problem.prepotential.eval(&w)?;
    let g = r * r * v.f;
    let ga: Vec<C> = v.fa.iter().map(|f| r * f).collect();
    let wn: Vec<C> = eta.iter().map(|e| zeta * e).collect();
    let fg: C = (0..m).map(|a| wn[a] * ga[a]).sum::<C>() - 2.0 * g;
    let mut val = I * fg / (zeta * zeta);
    for a in 0..m {
        val += I * (etat[a] - ga[a] / zeta) * wn[a] / zeta;
    }
    Ok(val)
}

fn magnetic_electric(grid: &TwistorFunctionGrid, zeta: C) -> Result<(Vec<C>, Vec<C>)> {
    let rank = grid.rank();
    let m = rank / 2;
    let all: Vec<C> = (0..rank).map(|a| eta_arctic(grid, &Charge::basis(rank, a), zeta)).collect::<Result<_>>()?;
    Ok((all[..m].to_vec(), all[m..].to_vec()))
}

fn ray_sides(grid: &TwistorFunctionGrid, r: usize, modulus: f64, s: f64) -> Result<(Vec<C>, Vec<C>)> {
    let rank = grid.rank();
    let m = rank / 2;
    let all: Vec<C> =
        (0..rank).map(|a| grid.eta_on_ray(&Charge::basis(rank, a), r, modulus, s)).collect::<Result<_>>()?;
    Ok((all[..m].to_vec(), all[m..].to_vec()))
}

/// Scalar gluing function on the named overlap. For `Ray(r)` the point is
/// moved onto the ray at `|zeta|` and the value is
/// `i sum Omega L(X_gamma) + (i/2)(eta~^+ eta^+ - eta~^- eta^-)` with `+` the
/// counterclockwise side and `L = Li2(X) + (i eta / 2) ln(1 - X)`; then
/// `d phi = i (A^+ - A^-)` with `A = eta~_A d eta^A`.
pub fn gluing_function(problem: &TbaProblem, grid: &TwistorFunctionGrid, zeta: C, sector: GluingSector) -> Result<C> {
    match sector {
        GluingSector::Arctic => {
            let (_, eta) = magnetic_electric(grid, zeta)?;
            let r = problem.scale;
            let w: Vec<C> = eta.iter().map(|e| zeta * e / r).collect();
            let g = r * r * problem.prepotential.eval(&w)?.f;
            Ok(arctic_potential(problem, grid, zeta)? + I * g / (zeta * zeta))
        }
        GluingSector::Antarctic => {
            let anti = -1.0 / zeta.conj();
            Ok(gluing_function(problem, grid, anti, GluingSector::Arctic)?.conj())
        }
        GluingSector::Ray(r) => {
            if r >= grid.rays.len() {
                return Err(Error::Domain(format!("no ray {r}")));
            }
            let modulus = zeta.norm();
            let ray = &grid.rays[r];
            let mut val = ZERO;
            for (k, g) in ray.charges.iter().enumerate() {
                let e = grid.eta_on_ray(g, r, modulus, 1.0)?;
                let x = ray.sigmas[k] * (I * e).exp();
                val += I * ray.omegas[k] as f64 * rogers_l_with_log(x, I * e)?;
            }
            let (tp, ep) = ray_sides(grid, r, modulus, 1.0)?;
            let (tm, em) = ray_sides(grid, r, modulus, -1.0)?;
            for a in 0..tp.len() {
                val += 0.5 * I * (tp[a] * ep[a] - tm[a] * em[a]);
            }
            Ok(val)
        }
    }
}

/// `max_a |X^ccw_a - (prod_gamma T_gamma^Omega X^cw)_a|` on ray `r` at `|zeta| = modulus`.
pub fn ray_jump_residual(grid: &TwistorFunctionGrid, r: usize, modulus: f64) -> Result<f64> {
    let rank = grid.rank();
    let basis: Vec<Charge> = (0..rank).map(|a| Charge::basis(rank, a)).collect();
    let side = |s: f64| -> Result<TorusPoint> {
        TorusPoint::new(
            basis.iter().map(|g| Ok((I * grid.eta_on_ray(g, r, modulus, s)?).exp())).collect::<Result<Vec<_>>>()?,
        )
    };
    let cw = side(-1.0)?;
    let ccw = side(1.0)?;
    let mut cur = cw;
    for (g, &o) in grid.rays[r].charges.iter().zip(&grid.rays[r].omegas) {
        cur = ks_transform_pow(&grid.lattice, g, &cur, o as i64)?;
    }
    Ok(cur.basis_values.iter().zip(&ccw.basis_values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
}

/// `max_b |d_{psi_b} phi_r - i (A^+ - A^-)_b|` with `A = eta~_A d eta^A`,
/// the cocycle condition of the ray gluing along the fibre.
pub fn ray_cocycle_residual(problem: &TbaProblem, pt: &FiberPoint, r: usize, modulus: f64) -> Result<f64> {
    let x = pt.to_real();
    let m = problem.m();
    let grid = problem.solve_warm(pt, None, STENCIL_TOL)?;
    let zeta = grid.rays.get(r).ok_or_else(|| Error::Domain(format!("no ray {r}")))?.direction * modulus;
    let eval = |p: &[f64]| -> Result<Vec<C>> {
        let mut y = x.clone();
        y[2 * m..].copy_from_slice(p);
        let g = problem.solve_warm(&FiberPoint::from_real(&y)?, Some(&grid), STENCIL_TOL)?;
        if g.rays.len() != grid.rays.len() {
            return Err(Error::Domain("ray structure changed along the fibre".into()));
        }
        let mut v = vec![gluing_function(problem, &g, zeta, GluingSector::Ray(r))?];
        let (_, ep) = ray_sides(&g, r, modulus, 1.0)?;
        let (_, em) = ray_sides(&g, r, modulus, -1.0)?;
        v.extend(ep);
        v.extend(em);
        Ok(v)
    };
    let psi0 = x[2 * m..].to_vec();
    let p = fd_partials(eval, &psi0)?;
    let (tp, _) = ray_sides(&grid, r, modulus, 1.0)?;
    let (tm, _) = ray_sides(&grid, r, modulus, -1.0)?;
    let mut worst = 0.0_f64;
    for b in 0..2 * m {
        let mut a = ZERO;
        for k in 0..m {
            a += tp[k] * p[b][1 + k] - tm[k] * p[b][1 + m + k];
        }
        worst = worst.max((p[b][0] - I * a).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
