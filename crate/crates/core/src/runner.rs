//! Scenario configuration, suite execution and report serialization.
//!
//! A scenario names a family (`semiflat`, `ov` or `gmn`), the data defining
//! the metric, a set of fiber points and a list of checks. Each check is run
//! over every point and reports its worst residual against a fixed tolerance.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::charge::{Charge, SpectrumEntry, SymplecticLattice};
use crate::geometry::{
    chain_recursion_residual, exterior_d_2form, holomorphic_projectors, p01, spherical_ddbar_residual, u_from_zeta,
    Endomorphism, FiberPoint, ScalarField,
};
use crate::semiflat::{semiflat_frame, semiflat_omegas, semiflat_rot_action, Prepotential, PrepotentialConfig};
use crate::special::QuadratureRule;
use crate::tba::{
    diff_eq_residual, instanton_geometry, moment_maps, ray_jump_residual, stencil_invariants, wall_smoothness_check,
    SolverOptions, TbaProblem,
};
use crate::toric::{ov_jump_residual, ov_mu, ov_phi, toric_frame, OvModel, OvParams, PhiMethod};
use crate::{Error, Result, C};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "HKFORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Semiflat,
    Ov,
    Gmn,
}

/// `(name, family, tolerance)` for every known check.
pub const CHECKS: &[(&str, Family, f64)] = &[
    ("quaternion", Family::Semiflat, 1e-9),
    ("closure", Family::Semiflat, 1e-6),
    ("reality", Family::Semiflat, 1e-10),
    ("projectors", Family::Semiflat, 1e-9),
    ("moment-maps", Family::Semiflat, 1e-6),
    ("chains", Family::Semiflat, 1e-6),
    ("dual-forms", Family::Ov, 1e-10),
    ("jump", Family::Ov, 1e-6),
    ("toric-frame", Family::Ov, 1e-9),
    ("tba-closed-form", Family::Ov, 1e-6),
    ("tba", Family::Gmn, 1e-10),
    ("frame", Family::Gmn, 1e-5),
    ("generators", Family::Gmn, 1e-5),
    ("diff-eq", Family::Gmn, 1e-5),
    ("qmm", Family::Gmn, 1e-4),
    ("consistency", Family::Gmn, 1e-6),
    ("twisted-rotation", Family::Gmn, 1e-4),
    ("hyper11", Family::Gmn, 1e-5),
    ("gluing", Family::Gmn, 1e-6),
    ("wallcross", Family::Gmn, 1e-7),
];

fn check_info(name: &str) -> Option<(usize, Family, f64)> {
    CHECKS.iter().position(|c| c.0 == name).map(|i| (i, CHECKS[i].1, CHECKS[i].2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    /// `z^A` as `[re, im]` pairs.
    pub z: Vec<[f64; 2]>,
    /// `(psi~, psi)`.
    pub psi: Vec<f64>,
}

/// Uniform samples in a box; every `z^A` and `psi` component is drawn independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPoints {
    pub count: usize,
    pub z_re: [f64; 2],
    pub z_im: [f64; 2],
    #[serde(default = "default_psi_box")]
    pub psi: [f64; 2],
}

fn default_psi_box() -> [f64; 2] {
    [0.0, 2.0 * std::f64::consts::PI]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointGrid {
    #[serde(default)]
    pub explicit: Vec<PointConfig>,
    #[serde(default)]
    pub random: Option<RandomPoints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub relaxation: f64,
    /// Quadrature half-width `L` in rapidity.
    pub half_width: f64,
    /// Quadrature node count `N`.
    pub nodes: usize,
    pub n_max: usize,
    /// Relative step of the outer stencil used by the stencil checks.
    pub fd_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            tol: o.tol,
            max_iter: o.max_iter,
            relaxation: o.relaxation,
            half_width: QuadratureRule::DEFAULT_HALF_WIDTH,
            nodes: QuadratureRule::DEFAULT_COUNT,
            n_max: 6,
            fd_scale: 1e-3,
        }
    }
}

/// Other side of a wall for the `wallcross` check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallConfig {
    pub tilt: Vec<f64>,
    pub partner_spectrum: Vec<SpectrumEntry>,
    pub partner_tilt: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub report: Option<String>,
    #[serde(default)]
    pub format: ReportFormat,
    /// Record wall-clock times; off by default so reports are byte-stable.
    #[serde(default)]
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub family: Family,
    #[serde(default)]
    pub prepotential: Option<PrepotentialConfig>,
    /// Ooguri-Vafa charge.
    #[serde(default)]
    pub q: Option<u32>,
    /// Pairing matrix; the canonical one when absent.
    #[serde(default)]
    pub lattice: Option<Vec<Vec<i64>>>,
    #[serde(default)]
    pub spectrum: Vec<SpectrumEntry>,
    #[serde(default = "yes")]
    pub cpt_closure: bool,
    #[serde(default = "unit")]
    pub scale: f64,
    #[serde(default)]
    pub wall: Option<WallConfig>,
    #[serde(default)]
    pub points: PointGrid,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

/// Parses and validates a scenario file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_config(&text)
}

/// Parses and validates a scenario from JSON text, filling defaults.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| {
        Error::Config(format!("parse error at line {} column {}: {e}", e.line(), e.column()))
    })?;
    if cfg.family == Family::Ov && cfg.q.is_none() {
        cfg.q = Some(1);
    }
    if cfg.checks.is_empty() {
        cfg.checks = CHECKS
            .iter()
            .filter(|c| c.1 == cfg.family && (c.0 != "wallcross" || cfg.wall.is_some()))
            .map(|c| c.0.to_string())
            .collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ScenarioConfig {
    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        for name in &self.checks {
            match check_info(name) {
                None => bad.push(format!("checks: unknown check {name:?}")),
                Some((_, fam, _)) if fam != self.family => {
                    bad.push(format!("checks: {name:?} does not apply to family {:?}", self.family))
                }
                _ => {}
            }
        }
        let s = &self.solver;
        if !(s.tol > 0.0) {
            bad.push("solver.tol: must be positive".into());
        }
        if s.max_iter == 0 {
            bad.push("solver.max_iter: must be positive".into());
        }
        if !(s.relaxation > 0.0 && s.relaxation <= 1.0) {
            bad.push("solver.relaxation: must lie in (0, 1]".into());
        }
        if let Err(e) = QuadratureRule::new(s.half_width, s.nodes) {
            bad.push(format!("solver.half_width/nodes: {e}"));
        }
        if s.n_max < 3 {
            bad.push("solver.n_max: must be at least 3".into());
        }
        if !(s.fd_scale > 0.0 && s.fd_scale < 0.1) {
            bad.push("solver.fd_scale: must lie in (0, 0.1)".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            bad.push("scale: must be positive".into());
        }
        let prep = match (self.family, &self.prepotential) {
            (Family::Ov, Some(_)) => {
                bad.push("prepotential: not used by family ov".into());
                None
            }
            (Family::Ov, None) => match self.q {
                Some(q) => Prepotential::ov_log(q).map_err(|e| bad.push(format!("q: {e}"))).ok(),
                None => None,
            },
            (_, None) => {
                bad.push("prepotential: required".into());
                None
            }
            (_, Some(p)) => p.build().map_err(|e| bad.push(format!("prepotential: {e}"))).ok(),
        };
        if self.family != Family::Ov && self.q.is_some() {
            bad.push("q: only used by family ov".into());
        }
        let m = prep.as_ref().map(|p| p.m());
        if let Some(l) = &self.lattice {
            match SymplecticLattice::from_matrix(l.clone()) {
                Ok(lat) if m.is_some_and(|m| lat.rank != 2 * m) => {
                    bad.push(format!("lattice: rank {} does not match 2m = {}", lat.rank, 2 * m.unwrap_or(0)))
                }
                Ok(_) => {}
                Err(e) => bad.push(format!("lattice: {e}")),
            }
        }
        if self.family == Family::Gmn {
            if self.spectrum.is_empty() {
                bad.push("spectrum: required for family gmn".into());
            }
        } else if !self.spectrum.is_empty() {
            bad.push("spectrum: only used by family gmn".into());
        }
        if let Some(m) = m {
            for (i, e) in self.spectrum.iter().enumerate() {
                if e.charge.len() != 2 * m {
                    bad.push(format!("spectrum[{i}]: charge has rank {}, expected {}", e.charge.len(), 2 * m));
                }
            }
        }
        let wants_wall = self.checks.iter().any(|c| c == "wallcross");
        match &self.wall {
            None if wants_wall => bad.push("wall: required by the wallcross check".into()),
            Some(w) => {
                if let Some(m) = m {
                    if w.tilt.len() != 2 * m || w.partner_tilt.len() != 2 * m {
                        bad.push(format!("wall: tilts need {} entries", 2 * m));
                    }
                    for (i, e) in w.partner_spectrum.iter().enumerate() {
                        if e.charge.len() != 2 * m {
                            bad.push(format!("wall.partner_spectrum[{i}]: wrong charge rank"));
                        }
                    }
                }
            }
            None => {}
        }
        let grid = &self.points;
        if grid.explicit.is_empty() && grid.random.as_ref().is_none_or(|r| r.count == 0) {
            bad.push("points: at least one point is required".into());
        }
        if let (Some(prep), Some(m)) = (&prep, m) {
            for (i, p) in grid.explicit.iter().enumerate() {
                if p.z.len() != m || p.psi.len() != 2 * m {
                    bad.push(format!("points.explicit[{i}]: needs {m} z values and {} psi values", 2 * m));
                    continue;
                }
                let z: Vec<C> = p.z.iter().map(|w| C::new(w[0], w[1])).collect();
                if !prep.in_domain(&z) || p.psi.iter().any(|v| !v.is_finite()) {
                    bad.push(format!("points.explicit[{i}]: outside the prepotential domain"));
                }
            }
            if let Some(r) = &grid.random {
                if !(r.z_re[0] <= r.z_re[1] && r.z_im[0] <= r.z_im[1] && r.psi[0] <= r.psi[1]) {
                    bad.push("points.random: empty box".into());
                } else {
                    // domains are intersections of discs, annuli and half planes;
                    // corners and edge midpoints cover the cases used in practice
                    let xs = [r.z_re[0], 0.5 * (r.z_re[0] + r.z_re[1]), r.z_re[1]];
                    let ys = [r.z_im[0], 0.5 * (r.z_im[0] + r.z_im[1]), r.z_im[1]];
                    let outside = xs.iter().any(|&x| ys.iter().any(|&y| !prep.in_domain(&vec![C::new(x, y); m])));
                    if outside {
                        bad.push("points.random: box leaves the prepotential domain".into());
                    }
                }
            }
        }
        if let Some(p) = &self.output.report {
            if p.is_empty() {
                bad.push("output.report: empty path".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn prep(&self) -> Result<Prepotential> {
        match self.family {
            Family::Ov => Prepotential::ov_log(self.q.unwrap_or(1)),
            _ => self.prepotential.as_ref().ok_or_else(|| Error::Config("prepotential missing".into()))?.build(),
        }
    }

    fn lattice(&self, m: usize) -> Result<SymplecticLattice> {
        match &self.lattice {
            Some(l) => SymplecticLattice::from_matrix(l.clone()),
            None => Ok(SymplecticLattice::canonical(m)),
        }
    }

    /// Explicit points followed by the seeded random ones.
    pub fn points(&self, m: usize) -> Result<Vec<FiberPoint>> {
        let mut out = Vec::new();
        for p in &self.points.explicit {
            out.push(FiberPoint::new(p.z.iter().map(|w| C::new(w[0], w[1])).collect(), p.psi.clone())?);
        }
        if let Some(r) = &self.points.random {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let draw = |rng: &mut ChaCha8Rng, b: [f64; 2]| if b[0] < b[1] { rng.gen_range(b[0]..b[1]) } else { b[0] };
            for _ in 0..r.count {
                let z = (0..m).map(|_| C::new(draw(&mut rng, r.z_re), draw(&mut rng, r.z_im))).collect();
                let psi = (0..2 * m).map(|_| draw(&mut rng, r.psi)).collect();
                out.push(FiberPoint::new(z, psi)?);
            }
        }
        Ok(out)
    }

    /// TBA problem for the gmn family, or the OV spectrum `{+-(0, q)}`.
    pub fn tba_problem(&self) -> Result<TbaProblem> {
        let prep = self.prep()?;
        let m = prep.m();
        let lat = self.lattice(m)?;
        let spectrum = match self.family {
            Family::Ov => {
                let q = self.q.unwrap_or(1) as i64;
                [(Charge(vec![0, q]), 1), (Charge(vec![0, -q]), 1)].into_iter().collect()
            }
            _ => spectrum_map(&self.spectrum, self.cpt_closure),
        };
        self.problem_with(lat, prep, spectrum)
    }

    fn problem_with(
        &self,
        lat: SymplecticLattice,
        prep: Prepotential,
        spectrum: BTreeMap<Charge, u32>,
    ) -> Result<TbaProblem> {
        let s = &self.solver;
        let mut p = TbaProblem::new(lat, prep, spectrum, self.scale)?
            .with_rule(QuadratureRule::new(s.half_width, s.nodes)?)
            .with_options(SolverOptions { tol: s.tol, max_iter: s.max_iter, relaxation: s.relaxation });
        p.n_max = s.n_max;
        p.fd_scale = s.fd_scale;
        Ok(p)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

fn spectrum_map(entries: &[SpectrumEntry], cpt: bool) -> BTreeMap<Charge, u32> {
    let mut map = BTreeMap::new();
    for e in entries {
        let g = Charge(e.charge.clone());
        if cpt {
            map.insert(-&g, e.omega);
        }
        map.insert(g, e.omega);
    }
    map
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    /// `None` when the check failed with an error before producing a residual.
    pub max_residual: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default)]
    pub wall_clock_s: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every configured check; a failing or erroring check never stops the others.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<CheckReport> {
    cfg.validate()?;
    let ctx = Context::new(cfg)?;
    let mut checks = Vec::new();
    for name in &cfg.checks {
        let (idx, _, tol) = check_info(name).ok_or_else(|| Error::Config(format!("unknown check {name:?}")))?;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| ctx.run(name, idx)))
            .unwrap_or_else(|_| Err(Error::Domain(format!("check {name} panicked"))));
        let elapsed = cfg.output.timings.then(|| start.elapsed().as_secs_f64());
        let r = match outcome {
            Ok(res) => CheckResult {
                name: name.clone(),
                points: ctx.points.len(),
                max_residual: Some(res),
                tolerance: tol,
                passed: res < tol,
                wall_clock_s: elapsed,
                error: None,
            },
            Err(e) => CheckResult {
                name: name.clone(),
                points: ctx.points.len(),
                max_residual: None,
                tolerance: tol,
                passed: false,
                wall_clock_s: elapsed,
                error: Some(e.to_string()),
            },
        };
        checks.push(r);
    }
    Ok(CheckReport {
        checks,
        provenance: Some(Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }),
    })
}

struct Context<'a> {
    cfg: &'a ScenarioConfig,
    prep: Prepotential,
    points: Vec<FiberPoint>,
}

fn max_abs(m: &Endomorphism) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn worst(it: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    let mut w: f64 = 0.0;
    for r in it {
        let r = r?;
        // NaN must not pass
        w = if r.is_nan() { f64::NAN } else { w.max(r) };
    }
    Ok(w)
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        let prep = cfg.prep()?;
        let points = cfg.points(prep.m())?;
        Ok(Self { cfg, prep, points })
    }

    fn rng(&self, idx: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(idx as u64 + 1);
        r
    }

    fn run(&self, name: &str, idx: usize) -> Result<f64> {
        let mut rng = self.rng(idx);
        let pts = &self.points;
        let prep = &self.prep;
        match name {
            "quaternion" => worst(pts.iter().map(|p| Ok(semiflat_frame(prep, p)?.quaternion_residual))),
            "reality" => worst(pts.iter().map(|p| Ok(semiflat_frame(prep, p)?.reality_residual()))),
            "closure" => worst(pts.iter().map(|p| {
                let x = p.to_real();
                worst((0..3).map(|k| {
                    let d = exterior_d_2form(
                        |y| {
                            let w = semiflat_omegas(prep, y)?;
                            Ok([w.0, w.1, w.2][k].clone())
                        },
                        &x,
                    )?;
                    Ok(d.max_abs())
                }))
            })),
            "projectors" => worst(pts.iter().map(|p| {
                let f = semiflat_frame(prep, p)?;
                let zetas: Vec<C> =
                    (0..5).map(|_| C::from_polar(rng.gen_range(0.1..5.0), rng.gen_range(-3.1..3.1))).collect();
                worst(zetas.into_iter().map(|zeta| projector_residual(&f, zeta)))
            })),
            "moment-maps" => worst(pts.iter().map(|p| {
                Ok(semiflat_rot_action(prep, p)?.residuals.iter().copied().fold(0.0, f64::max))
            })),
            "chains" => {
                let us: Vec<[f64; 3]> = (0..pts.len())
                    .map(|_| u_from_zeta(C::from_polar(rng.gen_range(0.2..3.0), rng.gen_range(-3.1..3.1))))
                    .collect();
                worst(pts.iter().zip(us).map(|(p, u)| cmap_chain_residual(prep, p, u)))
            }
            "dual-forms" => {
                let params = OvParams::with_q(self.cfg.q.unwrap_or(1));
                worst(pts.iter().map(|p| {
                    let a = ov_phi(&params, p.z[0], p.psi[1], PhiMethod::Bessel)?;
                    let b = ov_phi(&params, p.z[0], p.psi[1], PhiMethod::Poisson)?;
                    Ok((a - b).abs())
                }))
            }
            "jump" => {
                let params = OvParams::with_q(self.cfg.q.unwrap_or(1));
                worst(pts.iter().map(|p| ov_jump_residual(&params, p, 1e-2)))
            }
            "toric-frame" => {
                let model = OvModel::new(OvParams::with_q(self.cfg.q.unwrap_or(1)))?;
                worst(pts.iter().map(|p| Ok(toric_frame(&model, p)?.quaternion_residual)))
            }
            "tba-closed-form" => self.tba_closed_form(),
            _ => self.gmn(name, &mut rng),
        }
    }

    fn tba_closed_form(&self) -> Result<f64> {
        let params = OvParams::with_q(self.cfg.q.unwrap_or(1));
        let model = OvModel::new(params)?;
        let prob = self.cfg.tba_problem()?;
        let mut offsets = Vec::new();
        let mut w: f64 = 0.0;
        for p in &self.points {
            let geo = instanton_geometry(&prob, p)?;
            let f = geo.frame()?;
            let t = toric_frame(&model, p)?;
            for (a, b) in [(&f.omega_plus, &t.omega_plus), (&f.omega_zero, &t.omega_zero), (&f.omega_minus, &t.omega_minus)] {
                w = w.max(max_abs(&(a - b)));
            }
            offsets.push(geo.mu - ov_mu(&params, p.z[0], p.psi[1])?);
        }
        // the moment maps agree up to one constant
        let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
        Ok(offsets.iter().map(|o| (o - mean).abs()).fold(w, f64::max))
    }

    fn gmn(&self, name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
        let prob = self.cfg.tba_problem()?;
        let pts = &self.points;
        match name {
            "tba" => worst(pts.iter().map(|p| Ok(prob.solve(p)?.antipodal_residual()))),
            "frame" => worst(pts.iter().map(|p| Ok(instanton_geometry(&prob, p)?.frame()?.quaternion_residual))),
            "generators" => worst(pts.iter().map(|p| {
                let g = instanton_geometry(&prob, p)?.twisted_generators(&prob.lattice)?;
                Ok(g.residuals.iter().copied().fold(0.0, f64::max))
            })),
            "diff-eq" | "qmm" => worst(pts.iter().map(|p| {
                let geo = instanton_geometry(&prob, p)?;
                let gens = geo.twisted_generators(&prob.lattice)?;
                let mut w: f64 = 0.0;
                let mut done = 0;
                for _ in 0..20 {
                    if done == 3 {
                        break;
                    }
                    let zeta = C::from_polar(rng.gen_range(0.3..2.0), rng.gen_range(-3.1..3.1));
                    let r = if name == "diff-eq" {
                        diff_eq_residual(&prob, &geo, &gens, zeta)
                    } else {
                        geo.quasi_moment_map_residual(&gens, zeta)
                    };
                    match r {
                        Ok(v) => {
                            w = w.max(v);
                            done += 1;
                        }
                        Err(Error::RayProximity(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Ok(w)
            })),
            "consistency" => worst(pts.iter().map(|p| Ok(moment_maps(&prob, p)?.consistency_residual))),
            "twisted-rotation" => worst(pts.iter().map(|p| {
                Ok(stencil_invariants(&prob, p)?.twisted_rotation.iter().copied().fold(0.0, f64::max))
            })),
            "hyper11" => worst(pts.iter().map(|p| {
                let s = stencil_invariants(&prob, p)?;
                Ok(s.hyper11_zero.max(s.hyper11_plus))
            })),
            "gluing" => worst(pts.iter().map(|p| {
                let grid = prob.solve(p)?;
                worst((0..grid.rays.len()).flat_map(|r| [0.5, 1.0, 2.0].map(|m| ray_jump_residual(&grid, r, m))))
            })),
            "wallcross" => {
                let wall = self.cfg.wall.as_ref().ok_or_else(|| Error::Config("wall section missing".into()))?;
                let left = prob.clone().with_wall_tilt(wall.tilt.clone());
                let right = self
                    .cfg
                    .problem_with(
                        prob.lattice.clone(),
                        prob.prepotential.clone(),
                        spectrum_map(&wall.partner_spectrum, self.cfg.cpt_closure),
                    )?
                    .with_wall_tilt(wall.partner_tilt.clone());
                worst(pts.iter().map(|p| {
                    let d = wall_smoothness_check(&left, &right, p)?;
                    Ok(d.delta_mu.max(d.delta_i0).max(d.delta_frame))
                }))
            }
            other => Err(Error::Config(format!("unknown check {other:?}"))),
        }
    }
}

/// Idempotence, compatibility, factorizations and nilpotence of the
/// twistor-line projectors at one `zeta`.
pub fn projector_residual(f: &crate::geometry::FrameData, zeta: C) -> Result<f64> {
    let n = f.dim();
    let id = Endomorphism::identity(n, n);
    let (pn, ps, iz) = holomorphic_projectors(f, zeta)?;
    let u = u_from_zeta(zeta);
    let pu = p01(&f.i_u(u));
    let r2 = zeta.norm_sqr();
    let rho_n = 1.0 / (1.0 + r2);
    let rho_s = 1.0 / (1.0 + 1.0 / r2);
    let rho = C::new(rho_n * rho_s, 0.0);
    let conj = |m: &Endomorphism| m.map(|c| c.conj());
    let res = [
        max_abs(&(&pn * &pn - &pn)),
        max_abs(&(&ps * &ps - &ps)),
        max_abs(&((&id - &ps) * &pn)),
        max_abs(&((&ps - &pn) * C::new(0.0, 1.0) - &iz)),
        max_abs(&(&iz * &iz)),
        max_abs(&(&pu + &iz * conj(&iz) * rho)),
        max_abs(&(&pu - (&pn * C::new(rho_n, 0.0) + &ps * C::new(rho_s, 0.0)))),
        max_abs(&(&pu - &pn * conj(&(&id - &pn)) * C::new(rho_n, 0.0))),
    ];
    Ok(res.into_iter().fold(0.0, f64::max))
}

/// Chain recursions of the c-map chains `(0, -zbar^a, psi_a, z^a, 0)` and
/// `(0, -conj F_a, psi~_a, F_a, 0)`, and the spherical ddbar relation of
/// their middle triplets at the sphere point `u`.
pub fn cmap_chain_residual(prep: &Prepotential, pt: &FiberPoint, u: [f64; 3]) -> Result<f64> {
    let m = pt.m();
    let x = pt.to_real();
    let frame = semiflat_frame(prep, pt)?;
    let frame_field = |y: &[f64]| semiflat_frame(prep, &FiberPoint::from_real(y)?);
    let fa = |y: &[f64], a: usize| -> Result<C> { Ok(prep.eval(&FiberPoint::from_real(y)?.z)?.fa[a]) };
    let mut w: f64 = 0.0;
    for a in 0..m {
        let zero: &ScalarField = &|_| Ok(C::new(0.0, 0.0));
        let zb: &ScalarField = &|y| Ok(-C::new(y[a], -y[m + a]));
        let ps: &ScalarField = &|y| Ok(C::new(y[3 * m + a], 0.0));
        let z: &ScalarField = &|y| Ok(C::new(y[a], y[m + a]));
        let mfb: &ScalarField = &|y| Ok(-fa(y, a)?.conj());
        let pst: &ScalarField = &|y| Ok(C::new(y[2 * m + a], 0.0));
        let f: &ScalarField = &|y| fa(y, a);
        w = w.max(chain_recursion_residual(&[zero, zb, ps, z, zero], &frame, &x)?);
        w = w.max(chain_recursion_residual(&[zero, mfb, pst, f, zero], &frame, &x)?);
        for triplet in [[zero, zb, ps], [zb, ps, z], [ps, z, zero], [zero, mfb, pst], [mfb, pst, f], [pst, f, zero]] {
            w = w.max(spherical_ddbar_residual(triplet, frame_field, &x, u)?);
        }
    }
    Ok(w)
}

/// Sorted-key JSON with shortest round-trip floats.
pub fn report_to_json(report: &CheckReport) -> String {
    let v = serde_json::to_value(report).expect("report serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

/// Column order of the CSV report.
pub const CSV_COLUMNS: [&str; 7] = ["name", "points", "max_residual", "tolerance", "passed", "wall_clock_s", "error"];

pub fn report_to_csv(report: &CheckReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Io { path: "<csv>".into(), message: e.to_string() };
    w.write_record(CSV_COLUMNS).map_err(err)?;
    let num = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for c in &report.checks {
        w.write_record([
            c.name.clone(),
            c.points.to_string(),
            num(c.max_residual),
            format!("{:e}", c.tolerance),
            c.passed.to_string(),
            num(c.wall_clock_s),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io { path: "<csv>".into(), message: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(report: &CheckReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report_to_json(report),
        ReportFormat::Csv => report_to_csv(report)?,
    };
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<CheckReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("report at line {} column {}: {e}", e.line(), e.column())))
}

/// Seed from the environment, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Pentagon scenario used by the examples: `F = i z^2/2 + 2 z` on the
/// three-state side.
pub fn pentagon_example() -> ScenarioConfig {
    let text = r#"{
        "family": "gmn",
        "prepotential": {"kind": "custom", "terms": [
            {"coeff": [0.0, 0.5], "powers": [2]}, {"coeff": [2.0, 0.0], "powers": [1]}]},
        "spectrum": [{"charge": [0, 1], "omega": 1}, {"charge": [1, 0], "omega": 1}, {"charge": [1, 1], "omega": 1}],
        "scale": 3.45,
        "points": {"explicit": [{"z": [[0.1, 1.0]], "psi": [0.3, -0.5]}]},
        "checks": ["tba", "frame", "generators", "consistency"]
    }"#;
    parse_config(text).expect("valid example")
}
