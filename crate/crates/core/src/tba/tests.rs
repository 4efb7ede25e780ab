use super::*;
use crate::charge::pentagon_spectra;
use crate::semiflat::semiflat_frame;
use crate::toric::{ov_eta_tilde, ov_linst, ov_mu, toric_frame, OvModel, OvParams};

fn pt(z: C, psit: f64, psi: f64) -> FiberPoint {
    FiberPoint::new(vec![z], vec![psit, psi]).unwrap()
}

fn max_abs_m(m: &DMatrix<C>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn ov_problem(q: u32) -> TbaProblem {
    let mut spec = BTreeMap::new();
    spec.insert(Charge(vec![0, q as i64]), 1);
    spec.insert(Charge(vec![0, -(q as i64)]), 1);
    TbaProblem::new(SymplecticLattice::canonical(1), Prepotential::ov_log(q).unwrap(), spec, 1.0)
        .unwrap()
        .with_rule(QuadratureRule::new(7.0, 281).unwrap())
}

fn tau_prep(tau: C) -> Prepotential {
    Prepotential::quadratic(&DMatrix::from_element(1, 1, tau)).unwrap()
}

fn closed(spec: &[(Charge, u32)]) -> BTreeMap<Charge, u32> {
    let mut map = BTreeMap::new();
    for (g, o) in spec {
        map.insert(-g, *o);
        map.insert(g.clone(), *o);
    }
    map
}

fn pentagon_with(prep: Prepotential, three_state: bool, scale: f64) -> TbaProblem {
    let (two, three) = pentagon_spectra();
    let spec = closed(if three_state { &three } else { &two });
    TbaProblem::new(SymplecticLattice::canonical(1), prep, spec, scale).unwrap()
}

/// `F = i z^2 / 2 + 2 z`: `Z_m = i z + 2`, `Z_e = z`.
fn shifted() -> Prepotential {
    Prepotential::monomials(1, vec![(C::new(0.0, 0.5), vec![2]), (C::new(2.0, 0.0), vec![1])]).unwrap()
}

/// Three-state side: `arg Z_e > arg Z_m`.
fn three_state_point() -> FiberPoint {
    pt(C::new(0.1, 1.0), 0.3, -0.5)
}

/// Two-state side: `arg Z_m > arg Z_e`.
fn two_state_point() -> FiberPoint {
    pt(C::new(1.2, 0.3), 0.3, -0.5)
}

fn pentagon() -> TbaProblem {
    pentagon_with(shifted(), true, 3.45)
}

#[test]
fn empty_spectrum_is_semiflat() {
    let prob = TbaProblem::new(SymplecticLattice::canonical(1), tau_prep(I), BTreeMap::new(), 1.0).unwrap();
    let p = pt(C::new(0.3, 0.4), 0.2, -0.7);
    let grid = prob.solve(&p).unwrap();
    assert!(grid.rays.is_empty());
    assert_eq!(grid.iterations, 1);
    assert_eq!(grid.sup_residual(), 0.0);
    let zeta = C::new(0.4, 0.9);
    let e = eta_arctic(&grid, &Charge(vec![0, 1]), zeta).unwrap();
    assert_eq!(e, eta_sf(grid.central[1], 0.0 - 0.7, zeta));
    let lau = laurent_coeffs(&grid, 6).unwrap();
    assert!(lau.coeffs.iter().flatten().all(|c| *c == ZERO));
    let f = instanton_frame(&prob, &p).unwrap();
    let sf = semiflat_frame(&prob.prepotential, &p).unwrap();
    for (a, b) in [(&f.omega_plus, &sf.omega_plus), (&f.omega_zero, &sf.omega_zero), (&f.omega_minus, &sf.omega_minus)] {
        assert!(max_abs_m(&(a - b)) < 1e-10, "{}", max_abs_m(&(a - b)));
    }
    let mm = moment_maps(&prob, &p).unwrap();
    let x = p.to_real();
    assert!((mm.mu - crate::semiflat::mu_sf(&prob.prepotential, &x).unwrap()).abs() < 1e-14);
    assert!((mm.phi_plus - crate::semiflat::phi_plus(&prob.prepotential, &x).unwrap()).norm() < 1e-14);
    assert!(mm.consistency_residual < 1e-14);
    let gens = twisted_generators(&prob, &p).unwrap();
    let sfg = crate::semiflat::twisted_generators(&prob.prepotential, &x).unwrap();
    assert!((&gens.x_plus - &sfg[0]).norm() < 1e-9);
}

#[test]
fn ov_ray_structure_and_one_shot() {
    let prob = ov_problem(1);
    let p = pt(C::new(0.3, 0.2), 0.4, 1.0);
    let grid = prob.solve(&p).unwrap();
    assert_eq!(grid.rays.len(), 2);
    assert_eq!(grid.iterations, 1);
    assert_eq!(grid.sup_residual(), 0.0);
    // directions of qz/zeta in +-iR_+
    for ray in &grid.rays {
        let w = ray.z[0] / ray.direction;
        assert!(w.re.abs() < 1e-14 && w.im > 0.0);
    }
    assert!(grid.antipodal_residual() < 1e-14);
    let json: serde_json::Value = serde_json::from_str(&grid.report_json()).unwrap();
    assert_eq!(json["iterations"], 1);
    assert_eq!(json["per_ray_node_counts"].as_array().unwrap().len(), 2);
}

#[test]
fn ov_matches_closed_forms() {
    for q in [1u32, 2] {
        let prob = ov_problem(q);
        let params = OvParams::with_q(q);
        for (z, psit, psi) in [(C::new(0.3, 0.2), 0.4, 1.0), (C::new(-0.2, 0.45), -1.1, 2.3)] {
            let p = pt(z, psit, psi);
            let (grid, lau) = prob.laurent(&p).unwrap();
            assert!(lau.reality_residual < 1e-12, "{}", lau.reality_residual);
            assert!(lau.i_coeff(0, 0).im.abs() < 1e-14);
            // I_{gamma_m,0} against the psi-derivative of the Bessel series
            let h = 1e-3;
            let lp = |s: f64| ov_linst(&params, z, psi + s).unwrap().value;
            let d1 = (lp(h) - lp(-h)) / (2.0 * h);
            let d2 = (lp(h / 2.0) - lp(-h / 2.0)) / h;
            let lpsi = (4.0 * d2 - d1) / 3.0;
            assert!((lau.i_coeff(0, 0).re - lpsi).abs() < 1e-8, "q={q}: {} vs {lpsi}", lau.i_coeff(0, 0).re);
            for zeta in [C::new(0.5, 0.6), C::new(-1.3, 0.2), C::new(0.05, -0.4), C::new(2.0, -1.0)] {
                let a = eta_arctic(&grid, &Charge(vec![1, 0]), zeta).unwrap();
                let b = ov_eta_tilde(&params, &p, zeta).unwrap();
                assert!((a - b).norm() < 1e-8, "q={q} zeta={zeta}: {}", (a - b).norm());
            }
        }
    }
}

#[test]
fn series_matches_direct_integral() {
    // the series is asymptotic; |Z| = 2.5 keeps the n = 7 remainder below 1e-8 at |zeta| = 0.1
    let prob = ov_problem(1);
    let p = pt(C::new(2.0, 1.5), 0.4, 1.0);
    let (grid, lau) = prob.laurent(&p).unwrap();
    for k in 0..8 {
        let zeta = C::from_polar(0.1, 0.3 + k as f64 * 0.77);
        for g in [Charge(vec![1, 0]), Charge(vec![1, 1])] {
            let d = eta_arctic(&grid, &g, zeta).unwrap();
            let s = lau.eta_series(&g, zeta);
            assert!((d - s).norm() < 1e-7, "{}", (d - s).norm());
        }
    }
    // residue of the simple pole
    let tiny = C::from_polar(1e-6, 0.4);
    let e = eta_arctic(&grid, &Charge(vec![1, 0]), tiny).unwrap();
    assert!((e * tiny - grid.central[0]).norm() < 1e-5);
}

#[test]
fn ov_frame_and_moment_map() {
    let prob = ov_problem(1);
    let model = OvModel::new(OvParams::default()).unwrap();
    let params = OvParams::default();
    let pts = [pt(C::new(0.3, 0.2), 0.4, 1.0), pt(C::new(0.5, -0.3), -1.0, 2.5), pt(C::new(0.25, 0.4), 0.1, -0.6)];
    let mut offsets = Vec::new();
    for p in &pts {
        let geo = instanton_geometry(&prob, p).unwrap();
        let f = geo.frame().unwrap();
        let t = toric_frame(&model, p).unwrap();
        for (a, b) in [(&f.omega_plus, &t.omega_plus), (&f.omega_zero, &t.omega_zero), (&f.omega_minus, &t.omega_minus)] {
            assert!(max_abs_m(&(a - b)) < 1e-6, "{}", max_abs_m(&(a - b)));
        }
        assert!(geo.truncation_residual() < 1e-6, "{}", geo.truncation_residual());
        offsets.push(geo.mu - ov_mu(&params, p.z[0], p.psi[1]).unwrap());
        assert!((mu_integral(&geo.grid) - geo.mu_n).norm() < 1e-9 || (mu_integral(&geo.grid).re - geo.mu).abs() < 1e-9);
    }
    let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
    for o in &offsets {
        assert!((o - mean).abs() < 1e-7, "{offsets:?}");
    }
}

#[test]
fn pentagon_rays_and_contraction() {
    let p = three_state_point();
    let prob = pentagon();
    assert_eq!(prob.build(&p).unwrap().rays.len(), 6);
    assert_eq!(pentagon_with(shifted(), false, 3.45).build(&two_state_point()).unwrap().rays.len(), 4);
    let g = prob.build(&p).unwrap();
    let mx = g.max_abs_x();
    assert!(mx < 2e-3 && mx > 5e-4, "{mx}");
    let grid = prob.solve(&p).unwrap();
    assert!(grid.iterations <= 25, "{}", grid.iterations);
    let h = &grid.residual_history;
    for w in h.windows(2) {
        if w[0] > 1e-12 {
            assert!(w[1] <= 1e-2 * w[0], "{h:?}");
        }
    }
    assert!(grid.antipodal_residual() < 1e-12, "{}", grid.antipodal_residual());
    assert!(grid.max_abs_x() < 1.0);
    let lau = laurent_coeffs(&grid, 6).unwrap();
    assert!(lau.reality_residual < 1e-12);
    // deterministic
    assert_eq!(prob.solve(&p).unwrap(), grid);
}

#[test]
fn pentagon_geometry() {
    let p = three_state_point();
    let prob = pentagon();
    let geo = instanton_geometry(&prob, &p).unwrap();
    let f = geo.frame().unwrap();
    assert!(f.quaternion_residual < 1e-5, "{}", f.quaternion_residual);
    assert!(geo.reality_residual() < 1e-8);
    assert!(geo.truncation_residual() < 1e-6);
    let mm = moment_maps(&prob, &p).unwrap();
    assert!(mm.consistency_residual < 1e-6, "{}", mm.consistency_residual);
    assert!((mu_integral(&geo.grid) - mm.mu).norm() < 1e-10);
    let gens = geo.twisted_generators(&prob.lattice).unwrap();
    for r in gens.residuals {
        assert!(r < 1e-5, "{:?}", gens.residuals);
    }
    assert!(gens.x_zero.iter().all(|c| c.im.abs() < 1e-12));
    for zeta in [C::new(0.4, 0.3), C::new(-0.7, 0.9), C::new(1.5, -0.2)] {
        let d = diff_eq_residual(&prob, &geo, &gens, zeta).unwrap();
        assert!(d < 1e-5, "{d}");
        let q = geo.quasi_moment_map_residual(&gens, zeta).unwrap();
        assert!(q < 1e-4, "{q}");
    }
}

#[test]
fn ov_generators_and_invariants() {
    let prob = ov_problem(1);
    let p = pt(C::new(0.3, 0.2), 0.4, 1.0);
    let geo = instanton_geometry(&prob, &p).unwrap();
    let gens = geo.twisted_generators(&prob.lattice).unwrap();
    for r in gens.residuals {
        assert!(r < 1e-5, "{:?}", gens.residuals);
    }
    for zeta in [C::new(0.4, 0.3), C::new(-0.7, 0.9)] {
        assert!(diff_eq_residual(&prob, &geo, &gens, zeta).unwrap() < 1e-5);
        assert!(geo.quasi_moment_map_residual(&gens, zeta).unwrap() < 1e-4);
    }
    let inv = stencil_invariants(&prob, &p).unwrap();
    for r in inv.twisted_rotation {
        assert!(r < 1e-4, "{inv:?}");
    }
    assert!(inv.hyper11_zero < 1e-5 && inv.hyper11_plus < 1e-5, "{inv:?}");
}

#[test]
fn pentagon_stencil_invariants() {
    let inv = stencil_invariants(&pentagon(), &three_state_point()).unwrap();
    for r in inv.twisted_rotation {
        assert!(r < 1e-4, "{inv:?}");
    }
    assert!(inv.hyper11_zero < 1e-5 && inv.hyper11_plus < 1e-5, "{inv:?}");
}

fn wall_problem(spec: &[(Charge, u32)], tilt: [f64; 2]) -> TbaProblem {
    TbaProblem::new(SymplecticLattice::canonical(1), tau_prep(C::new(1.5, 0.0)), closed(spec), 2.5)
        .unwrap()
        .with_wall_tilt(tilt.to_vec())
}

#[test]
fn wall_smoothness() {
    let p = pt(C::new(0.7, 0.4), 0.3, -0.5);
    let (two, three) = pentagon_spectra();
    // the bound state lives where arg Z_e > arg Z_m
    let left = wall_problem(&two, [1.0, -1.0]);
    let right = wall_problem(&three, [-1.0, 1.0]);
    assert!(matches!(pentagon_with(tau_prep(C::new(1.5, 0.0)), true, 2.5).build(&p), Err(Error::Wall(_))));
    let d = wall_smoothness_check(&left, &right, &p).unwrap();
    assert!(d.partner_residual < 1e-12, "{d:?}");
    assert!(d.delta_mu < 1e-7 && d.delta_i0 < 1e-7 && d.delta_frame < 1e-7, "{d:?}");
    let same = wall_smoothness_check(&right, &right, &p).unwrap();
    assert_eq!((same.delta_mu, same.delta_i0, same.delta_frame), (0.0, 0.0, 0.0));
    // the opposite side assignment is not a partner pair and is not smooth
    let bad = wall_smoothness_check(&wall_problem(&two, [-1.0, 1.0]), &wall_problem(&three, [1.0, -1.0]), &p).unwrap();
    assert!(bad.partner_residual > 1e-3 && bad.delta_mu > 1e-6, "{bad:?}");
    let (a, b) = (two[0].clone(), two[1].clone());
    let nc = wall_smoothness_check(&wall_problem(&[a], [1.0, -1.0]), &wall_problem(&[b], [-1.0, 1.0]), &p).unwrap();
    assert!(nc.delta_mu > 1e-4, "{nc:?}");
    assert!(wall_smoothness_check(&pentagon(), &pentagon(), &p).is_err());
}

#[test]
fn gluing_functions() {
    let prob = ov_problem(1);
    let q = pt(C::new(0.3, 0.2), 0.4, 1.0);
    let grid = prob.solve(&q).unwrap();
    for r in 0..grid.rays.len() {
        assert!(ray_jump_residual(&grid, r, 0.8).unwrap() < 1e-6);
        assert!(ray_cocycle_residual(&prob, &q, r, 0.8).unwrap() < 1e-8);
    }
    let pprob = pentagon();
    let pp = three_state_point();
    let pg = pprob.solve(&pp).unwrap();
    for r in 0..pg.rays.len() {
        assert!(ray_jump_residual(&pg, r, 0.8).unwrap() < 1e-10);
        assert!(ray_cocycle_residual(&pprob, &pp, r, 0.8).unwrap() < 1e-8);
    }
    // gauge condition: order-0 Fourier coefficient of phi_{V_N} on a small circle
    for (pr, pt0, gr, eps) in [(&prob, &q, &grid, 0.01), (&pprob, &pp, &pg, 0.05)] {
        let lau = laurent_coeffs(gr, 6).unwrap();
        let n = 64;
        let mut c0 = ZERO;
        for k in 0..n {
            let zeta = C::from_polar(eps, 2.0 * PI * (k as f64 + 0.5) / n as f64);
            c0 += arctic_potential(pr, gr, zeta).unwrap() / n as f64;
        }
        let mu = mu_n(&pr.lattice, &lau).re;
        let fab = pr.prepotential.eval(&pt0.z).unwrap().fab;
        let v = pt0.psi[1] + 0.5 * I * lau.i_coeff(1, 0);
        let u = pt0.psi[0] - fab[(0, 0)] * v + 0.5 * I * lau.i_coeff(0, 0);
        let d = c0 - mu - I * u * v;
        assert!(d.norm() < 1e-8, "{d}");
    }
    // polar gluings are related by antipodal conjugation
    let zeta = C::new(0.3, 0.5);
    let a = gluing_function(&pprob, &pg, zeta, GluingSector::Arctic).unwrap();
    let b = gluing_function(&pprob, &pg, -1.0 / zeta.conj(), GluingSector::Antarctic).unwrap();
    assert!((a.conj() - b).norm() < 1e-14);
    // empty spectrum: trivial ray gluing is absent, polar gluing is the semi-flat one
    let empty = TbaProblem::new(SymplecticLattice::canonical(1), tau_prep(I), BTreeMap::new(), 1.0).unwrap();
    let eg = empty.solve(&q).unwrap();
    assert!(matches!(gluing_function(&empty, &eg, zeta, GluingSector::Ray(0)), Err(Error::Domain(_))));
}

#[test]
fn instanton_decay_with_scale() {
    // |I| ~ exp(-2 R |Z_min|) up to a power of R
    let p = pt(C::new(0.3, 0.2), 0.4, 1.0);
    let zmin = p.z[0].norm();
    let size = |r: f64| {
        let mut prob = ov_problem(1);
        prob.scale = r;
        prob.laurent(&p).unwrap().1.i_coeff(0, 0).norm()
    };
    let (r1, r2) = (2.0, 20.0);
    let rate = (size(r2) / size(r1)).ln() / (-2.0 * (r2 - r1) * zmin);
    assert!((rate - 1.0).abs() < 0.1, "{rate}");
}

#[test]
fn solver_errors() {
    let p = three_state_point();
    // tiny scale: |X| >= 1 somewhere after the first update
    let small = pentagon_with(shifted(), true, 0.05).with_options(SolverOptions { max_iter: 50, ..Default::default() });
    assert!(matches!(small.solve(&p), Err(Error::Divergence(_)) | Err(Error::NonConvergence { .. })));
    let capped = pentagon().with_options(SolverOptions { max_iter: 2, tol: 1e-14, relaxation: 1.0 });
    match capped.solve(&p) {
        Err(Error::NonConvergence { history }) => assert_eq!(history.len(), 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        pentagon().with_options(SolverOptions { relaxation: 0.0, ..Default::default() }).solve(&p),
        Err(Error::Config(_))
    ));
    // under-relaxation still converges to the same fixed point
    let relaxed = pentagon().with_options(SolverOptions { relaxation: 0.7, max_iter: 200, tol: 1e-12 });
    let a = laurent_coeffs(&relaxed.solve(&p).unwrap(), 4).unwrap();
    let b = laurent_coeffs(&pentagon().solve(&p).unwrap(), 4).unwrap();
    assert!((a.i_coeff(0, 0) - b.i_coeff(0, 0)).norm() < 1e-10);
    let grid = pentagon().solve(&p).unwrap();
    let on_ray = grid.rays[0].direction * 0.7;
    let c = &grid.rays[0].charges[0];
    let partner = Charge(vec![c.0[1], -c.0[0]]);
    assert!(matches!(eta_arctic(&grid, &partner, on_ray), Err(Error::RayProximity(_))));
    assert!(matches!(eta_arctic(&grid, &Charge(vec![1, 0]), ZERO), Err(Error::Domain(_))));
    assert!(matches!(eta_arctic(&grid, &Charge(vec![1, 0, 0]), C::new(0.1, 0.2)), Err(Error::RankMismatch { .. })));
    let zero_z = FiberPoint::new(vec![ZERO], vec![0.0, 0.0]).unwrap();
    assert!(ov_problem(1).solve(&zero_z).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn reality_properties(x in 0.5..1.5f64, y in 0.6..1.4f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
            // keep arg Z_e > arg Z_m: three-state side of F = i z^2/2 + 2 z
            let z = C::new(x - 1.2, y);
            let zm = I * z + 2.0;
            prop_assume!(z.arg() > zm.arg() + 0.05 && z.arg() - zm.arg() < PI - 0.05);
            let p = pt(z, a, b);
            let grid = pentagon().solve(&p).unwrap();
            prop_assert!(grid.antipodal_residual() < 1e-12);
            prop_assert!(grid.max_abs_x() < 1.0);
            let lau = laurent_coeffs(&grid, 6).unwrap();
            prop_assert!(lau.reality_residual < 1e-12);
            let zeta = C::from_polar(0.6, a);
            if let (Ok(e1), Ok(e2)) = (
                eta_arctic(&grid, &Charge(vec![1, 1]), zeta),
                eta_arctic(&grid, &Charge(vec![1, 1]), -1.0 / zeta.conj()),
            ) {
                prop_assert!((e1 - e2.conj()).norm() < 1e-10);
            }
        }
    }
}
