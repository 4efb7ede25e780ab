//! End-to-end: the same OV geometry from the closed form, the toric route
//! and the integral equation.

use std::collections::BTreeMap;

use hkforge_core::charge::{Charge, SymplecticLattice};
use hkforge_core::geometry::FiberPoint;
use hkforge_core::runner::{pentagon_example, report_to_csv, run_scenario};
use hkforge_core::semiflat::Prepotential;
use hkforge_core::special::QuadratureRule;
use hkforge_core::tba::{instanton_geometry, TbaProblem};
use hkforge_core::toric::{gh_assemble, ov_mu, toric_frame, OvModel, OvParams};
use hkforge_core::C;

fn max_abs(m: &nalgebra::DMatrix<C>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

#[test]
fn ov_three_routes_agree() {
    let params = OvParams::with_q(2);
    let model = OvModel::new(params).unwrap();
    let mut spec = BTreeMap::new();
    spec.insert(Charge(vec![0, 2]), 1);
    spec.insert(Charge(vec![0, -2]), 1);
    let prob = TbaProblem::new(SymplecticLattice::canonical(1), Prepotential::ov_log(2).unwrap(), spec, 1.0)
        .unwrap()
        .with_rule(QuadratureRule::new(7.0, 281).unwrap());
    let mut offsets = Vec::new();
    for (z, a, b) in [(C::new(0.2, 0.1), 0.3, 0.9), (C::new(-0.15, 0.3), -1.2, 2.0)] {
        let p = FiberPoint::new(vec![z], vec![a, b]).unwrap();
        let t = toric_frame(&model, &p).unwrap();
        let gh = gh_assemble(&model, &p.z, &p.psi[1..]).unwrap();
        assert!(gh.bogomolny_residual < 1e-6, "{}", gh.bogomolny_residual);
        assert!(t.quaternion_residual < 1e-9);
        let geo = instanton_geometry(&prob, &p).unwrap();
        let f = geo.frame().unwrap();
        assert!(max_abs(&(&f.omega_zero - &t.omega_zero)) < 1e-6);
        assert!(max_abs(&(&f.omega_plus - &t.omega_plus)) < 1e-6);
        offsets.push(geo.mu - ov_mu(&params, z, b).unwrap());
    }
    assert!((offsets[0] - offsets[1]).abs() < 1e-7, "{offsets:?}");
}

#[test]
fn pentagon_scenario_report() {
    let report = run_scenario(&pentagon_example()).unwrap();
    assert!(report.all_passed(), "{report:?}");
    let csv = report_to_csv(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.checks.len());
}
