//! Property tests for the structural invariants of each module.

use proptest::prelude::*;
use sympcocycle::base::{
    heteroclinic_point_catmap, periodic_points_catmap, stable_leaf_point, suspend_flow, BasePoint, BaseSystem,
    PeriodicOrbit, RatPoint, RoofFunction, SuspensionPoint,
};
use sympcocycle::cocycle::{field_eval, fundamental_solution, gronwall_check, GeneratorField, Suspension};
use sympcocycle::holonomy::{atomic_measure_at_periodic, pushforward_compare_matrix, return_map, stable_holonomy};
use sympcocycle::perturbation::{
    build_perturbation_with_budget, outside_box_difference, PerturbationBudget,
};
use sympcocycle::spectrum::spectrum_induced;
use sympcocycle::symplectic::{
    algebra_defect, make_standard_form, random_generator, random_symplectic, spectrum_symmetry_check, HamGenerator,
    Mat, SympMatrix,
};

fn bump() -> Suspension {
    Suspension::new(BaseSystem::CatMap, RoofFunction::cosine_bump(2.0, 0.5).unwrap()).unwrap()
}

fn point() -> impl Strategy<Value = SuspensionPoint> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(u, v, frac)| {
        let base = BasePoint::torus(u, v);
        let height = frac * RoofFunction::cosine_bump(2.0, 0.5).unwrap().eval(&BaseSystem::CatMap, &base);
        SuspensionPoint { base, height }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_generators_are_traceless_hamiltonian(seed in any::<u64>(), ell in 1usize..=4, scale in 0.01..10.0f64) {
        let form = make_standard_form(ell).unwrap();
        let h = random_generator(ell, seed, scale).unwrap();
        prop_assert!(algebra_defect(h.matrix(), &form).unwrap() <= 1e-13 * scale.max(1.0));
        prop_assert!(h.matrix().trace().abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn symplectic_spectrum_is_symmetric(seed in any::<u64>(), ell in 1usize..=3) {
        let a = random_symplectic(ell, seed, 0.8).unwrap();
        prop_assert!(spectrum_symmetry_check(&a, 1e-8).holds);
    }

    #[test]
    fn flow_composes_and_inverts(p in point(), t in -20.0..20.0f64, s in -20.0..20.0f64) {
        let sys = BaseSystem::CatMap;
        let roof = RoofFunction::cosine_bump(2.0, 0.5).unwrap();
        let two = suspend_flow(&sys, &roof, &suspend_flow(&sys, &roof, &p, t).unwrap(), s).unwrap();
        let one = suspend_flow(&sys, &roof, &p, t + s).unwrap();
        prop_assert!(sys.distance(&two.base, &one.base) <= 1e-12);
        prop_assert!((two.height - one.height).abs() <= 1e-12);
        let back = suspend_flow(&sys, &roof, &suspend_flow(&sys, &roof, &p, t).unwrap(), -t).unwrap();
        prop_assert!(sys.distance(&back.base, &p.base) <= 1e-12);
        prop_assert!((back.height - p.height).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cocycle_values_satisfy_group_invariants(seed in 0u64..1000, ell in 1usize..=2, p in point(), t in 0.5..10.0f64) {
        let susp = bump();
        let field = GeneratorField::random(ell, seed, 0.5, 2).unwrap();
        let form = make_standard_form(ell).unwrap();
        let h = 1e-2;
        // A single Cayley step.
        let one = fundamental_solution(&field, &susp, &p, h, h).unwrap();
        prop_assert!(one.defect <= 1e-14);
        let phi = fundamental_solution(&field, &susp, &p, t, h).unwrap();
        prop_assert!(phi.defect <= 1e-10);
        prop_assert!(spectrum_symmetry_check(&phi.value, 1e-8).holds);
        let back = fundamental_solution(&field, &susp, &susp.flow(&p, t).unwrap(), -t, h).unwrap();
        let id = Mat::identity(2 * ell, 2 * ell);
        prop_assert!((phi.value.matrix() * back.value.matrix() - id).norm() <= 1e-9);
        let (lhs, rhs) = gronwall_check(&field, &susp, &p, t, h).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-6));
        prop_assert!(algebra_defect(field_eval(&field, &susp, &p).unwrap().matrix(), &form).unwrap() <= 1e-12);
    }

    #[test]
    fn perturbations_are_local_closed_and_within_budget(
        u in 0.0..1.0f64,
        v in 0.0..1.0f64,
        angle in 0.05..0.45f64,
        seed in 0u64..100,
    ) {
        let susp = bump();
        let field = GeneratorField::random(1, seed, 0.05, 1).unwrap();
        let budget = PerturbationBudget::new(0.1, 2.0).unwrap();
        let g = HamGenerator::new(Mat::from_row_slice(2, 2, &[0.0, -angle, angle, 0.0]) * budget.delta).unwrap();
        let target = SympMatrix::new(sympcocycle::symplectic::expm(g.matrix())).unwrap();
        let x = SuspensionPoint { base: BasePoint::torus(u, v), height: 0.1 };
        let pert = build_perturbation_with_budget(&field, &susp, &x, &target, 0.05, &budget, 1e-2).unwrap();
        prop_assert!(pert.measured_sup <= budget.allowed_sup());
        prop_assert!(budget.allowed_sup() < budget.epsilon);
        prop_assert_eq!(outside_box_difference(&pert, &susp, 50, seed).unwrap(), 0.0);
        let form = make_standard_form(1).unwrap();
        for k in 0..8 {
            let pt = SuspensionPoint { base: x.base.clone(), height: 0.1 + 0.12 * k as f64 };
            let hv = field_eval(&pert.resulting_field, &susp, &pt).unwrap();
            prop_assert!(algebra_defect(hv.matrix(), &form).unwrap() <= 1e-10);
        }
    }
}

#[test]
fn reorthogonalization_interval_is_immaterial_for_closed_forms() {
    let susp = Suspension::new(BaseSystem::CatMap, RoofFunction::constant(2.0).unwrap()).unwrap();
    let h = HamGenerator::new(Mat::from_row_slice(2, 2, &[0.3, 0.1, 0.2, -0.3])).unwrap();
    let field = GeneratorField::constant(&h);
    let x0 = BasePoint::torus(0.1, 0.7);
    let a = spectrum_induced(&field, &susp, &x0, 500, 1, 1e-2).unwrap();
    let b = spectrum_induced(&field, &susp, &x0, 500, 5, 1e-2).unwrap();
    for (x, y) in a.exponents.iter().zip(&b.exponents) {
        assert!((x - y).abs() <= 1e-8, "{a:?} {b:?}");
    }
    assert!(a.pairing_residual <= 1e-6);
}

#[test]
fn holonomies_shrink_to_identity_with_the_field() {
    let susp = bump();
    let p = PeriodicOrbit { point: RatPoint::origin(), period: 1 };
    let z = stable_leaf_point(RatPoint::origin(), 0.1);
    let mut last = f64::INFINITY;
    for scale in [0.08, 0.04, 0.02, 0.01, 0.005] {
        let field = GeneratorField::random(1, 13, scale, 2).unwrap();
        let l = stable_holonomy(&field, &susp, &p, &z, 60, 1e-10, 1e-2).unwrap();
        let dist = (l.map.matrix() - Mat::identity(2, 2)).norm();
        assert!(dist < last, "scale {scale}: {dist} !< {last}");
        last = dist;
    }
    assert!(last < 1e-2);
}

#[test]
fn periodic_atoms_are_invariant_under_the_return_map() {
    let susp = bump();
    let field = GeneratorField::constant(&HamGenerator::new(Mat::from_row_slice(2, 2, &[0.2, 0.3, 0.1, -0.2])).unwrap());
    for orbit in periodic_points_catmap(2).unwrap() {
        let m = atomic_measure_at_periodic(&field, &susp, &orbit, 1e-2).unwrap();
        let r = return_map(&field, &susp, &orbit, 1e-2).unwrap();
        assert!(pushforward_compare_matrix(&m, r.matrix(), &m).unwrap() <= 1e-8);
    }
}

#[test]
fn heteroclinic_orbits_converge_at_the_cat_rate() {
    let lambda = (3.0 + 5f64.sqrt()) / 2.0;
    let orbits = periodic_points_catmap(2).unwrap();
    for p in &orbits {
        for q in &orbits {
            let z = heteroclinic_point_catmap(p, q).unwrap();
            let (fwd, bwd) = z.convergence_profile(&BaseSystem::CatMap, 25).unwrap();
            let k = (fwd[0].max(bwd[0]) + 1e-12) * 2.0;
            for n in 0..=25 {
                let bound = k * lambda.powi(-(n as i32)) + 1e-12;
                assert!(fwd[n] <= bound && bwd[n] <= bound, "n={n}: {} {}", fwd[n], bwd[n]);
            }
        }
    }
}
