//! Property tests over random laws, point sets and samples.

use nalgebra::DVector;
use proptest::prelude::*;

use kras::dml::{linearity_defect, summarize};
use kras::estimators::{constrain_norm, fit, EstimatorConfig, Method};
use kras::experiment::{fit_power_law, theory_envelope};
use kras::kernels::{critical_radius, gram, rkhs_norm, KernelSpec, RepresenterFunction};
use kras::linalg::{sym_eigen, weighted_norm};
use kras::workbench::{
    adjointness_defect, build_dml_workbench, cond_exp_operator, kernel_integral_operator, make_source_problem, operator_sqrt,
    random_dgp, source_problem_from_seed, theta_triple, Direction, RandomDgpConfig, Side, Variant,
};

fn law(n_w: usize, n_z: usize, n_x: usize, seed: u64) -> kras::workbench::DiscreteDGP {
    random_dgp(&RandomDgpConfig { n_w, n_z, n_x, r_low: 0.5, r_high: 1.5, random_x0: false }, seed).unwrap()
}

fn kernels() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        (0.2..2.0f64).prop_map(KernelSpec::gaussian),
        (0.2..2.0f64).prop_map(|b| KernelSpec::sobolev(1.5, 1, b)),
        (1u32..4).prop_map(|d| KernelSpec::polynomial(d, 1.0)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gram_is_psd(kernel in kernels(), pts in prop::collection::vec(-3.0..3.0f64, 1..25)) {
        let points: Vec<Vec<f64>> = pts.iter().map(|&p| vec![p]).collect();
        let k = gram(&kernel, &points).unwrap();
        let min = sym_eigen(k.clone()).eigenvalues.min();
        prop_assert!(min >= -1e-10 * k.amax().max(1.0), "min eigenvalue {min}");
    }

    #[test]
    fn sup_norm_is_dominated_by_rkhs_norm(
        bw in 0.2..2.0f64,
        pts in prop::collection::vec(-2.0..2.0f64, 1..10),
        coefs in prop::collection::vec(-1.0..1.0f64, 10),
    ) {
        let kernel = KernelSpec::gaussian(bw);
        let support: Vec<Vec<f64>> = pts.iter().map(|&p| vec![p]).collect();
        let f = RepresenterFunction::new(support.clone(), coefs[..support.len()].to_vec(), kernel.clone(), None);
        let bound = kernel.diag_sup().unwrap().sqrt() * rkhs_norm(&f);
        for i in 0..=200 {
            let v = -4.0 + 8.0 * i as f64 / 200.0;
            prop_assert!(f.eval_unmasked(&[v]).abs() <= bound * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn critical_radius_decreases_in_n(kernel in kernels(), n in 2usize..5000, step in 1usize..5000) {
        let a = critical_radius(&kernel, n, None).unwrap();
        let b = critical_radius(&kernel, n + step, None).unwrap();
        prop_assert!(b <= a);
    }

    #[test]
    fn adjointness_and_square_root(n_w in 2usize..20, n_z in 2usize..20, n_x in 1usize..3, seed in 0u64..1000) {
        let dgp = law(n_w, n_z, n_x, seed);
        let t = cond_exp_operator(&dgp, Direction::Forward).unwrap();
        let t_star = cond_exp_operator(&dgp, Direction::Adjoint).unwrap();
        prop_assert!(adjointness_defect(&t, &t_star) <= 1e-12);
        let t_h = kernel_integral_operator(&dgp, &KernelSpec::gaussian(0.7), Side::W).unwrap();
        let s = operator_sqrt(&t_h).unwrap();
        prop_assert!((s.compose(&s).entries - &t_h.entries).amax() <= 1e-10 * t_h.entries.amax().max(1.0));
    }

    #[test]
    fn source_residual_vanishes(n_w in 2usize..20, n_z in 2usize..20, beta in 0.2..4.0f64, seed in 0u64..1000) {
        let dgp = law(n_w, n_z, 1, seed);
        let k = KernelSpec::gaussian(0.7);
        for variant in [Variant::Basic, Variant::Transformed] {
            let p = make_source_problem(&dgp, &k, &k, beta, variant, seed + 1).unwrap();
            prop_assert!(p.residual() <= 1e-10, "{variant:?}: {}", p.residual());
        }
    }

    #[test]
    fn source_variants_agree_at_beta_two(n_w in 2usize..15, n_z in 2usize..15, seed in 0u64..1000) {
        // h0 = T_H T* I0 T h* under the basic condition equals S (T~* T~) h** once h* = S h**.
        let dgp = law(n_w, n_z, 1, seed);
        let k = KernelSpec::gaussian(0.7);
        let h2 = DVector::from_fn(n_w, |i, _| ((i as f64 + 1.0) * (seed as f64 + 0.5)).sin());
        let s = operator_sqrt(&kernel_integral_operator(&dgp, &k, Side::W).unwrap()).unwrap();
        let transformed = source_problem_from_seed(&dgp, &k, &k, 2.0, Variant::Transformed, h2.clone()).unwrap();
        let basic = source_problem_from_seed(&dgp, &k, &k, 2.0, Variant::Basic, s.apply(&h2)).unwrap();
        let gap = (&transformed.h0_dag - &basic.h0_dag).amax();
        prop_assert!(gap <= 1e-10 * transformed.h0_dag.amax().max(1.0), "gap {gap}");
    }

    #[test]
    fn theta_ignores_null_space_of_either_nuisance(seed in 0u64..1000, shift in -3.0..3.0f64) {
        let dgp = law(9, 5, 1, seed);
        let k = KernelSpec::gaussian(0.7);
        let wb = build_dml_workbench(&dgp, &k, &k, 1.0, vec![true], 0.5, seed).unwrap();
        let base = theta_triple(&wb.dgp, &wb.moments, &wb.h0, &wb.g0).unwrap();
        prop_assert!((base.psi - base.phi).abs() <= 1e-10 && (base.psi - base.cross).abs() <= 1e-10);
        let null_h = wb.h_problem.null_directions();
        prop_assert!(null_h.ncols() > 0);
        let h = &wb.h0 + null_h.column(0) * shift;
        let moved = theta_triple(&wb.dgp, &wb.moments, &h, &wb.g0).unwrap();
        prop_assert!((moved.psi - base.psi).abs() <= 1e-10 && (moved.cross - base.cross).abs() <= 1e-10);
        let null_g = wb.g_problem.null_directions();
        if null_g.ncols() > 0 {
            let g = &wb.g0 + null_g.column(0) * shift;
            let moved = theta_triple(&wb.dgp, &wb.moments, &wb.h0, &g).unwrap();
            prop_assert!((moved.phi - base.phi).abs() <= 1e-10 && (moved.cross - base.cross).abs() <= 1e-10);
        }
    }

    #[test]
    fn moments_are_linear(seed in 0u64..1000, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let dgp = law(6, 5, 2, seed);
        let k = KernelSpec::gaussian(0.7);
        let wb = build_dml_workbench(&dgp, &k, &k, 1.0, vec![true, false], 0.5, seed).unwrap();
        let data = wb.dgp.sample(20, seed).unwrap();
        let f = |p: &[f64], x: f64| p[0].sin() + x;
        let g = |p: &[f64], x: f64| p[0] * p[0] - 2.0 * x;
        for o in &data.rows {
            prop_assert!(linearity_defect(&wb.moments, o, &f, &g, a, b) <= 1e-12);
        }
    }

    #[test]
    fn fold_relabeling_leaves_theta_unchanged(phi in prop::collection::vec(-5.0..5.0f64, 10..60), shift in 1usize..5) {
        let k = 5;
        let folds: Vec<usize> = (0..phi.len()).map(|i| i % k).collect();
        let relabeled: Vec<usize> = folds.iter().map(|f| (f + shift) % k).collect();
        let (a, b) = (summarize(&phi, &folds, k), summarize(&phi, &relabeled, k));
        prop_assert_eq!(a.theta_hat.to_bits(), b.theta_hat.to_bits());
        prop_assert_eq!(a.se.to_bits(), b.se.to_bits());
    }

    #[test]
    fn kras_norm_shrinks_and_constraint_holds(seed in 0u64..500, bound_share in 0.05..2.0f64) {
        let dgp = law(8, 6, 1, seed);
        let k = KernelSpec::gaussian(0.7);
        let wb = build_dml_workbench(&dgp, &k, &k, 1.0, vec![true], 0.5, seed).unwrap();
        let data = wb.dgp.sample(80, seed).unwrap();
        let mut last = f64::INFINITY;
        let mut norm_at_first = 0.0;
        for j in 0..8 {
            let lh = 1e-4 * 4f64.powi(j);
            let f = fit(&data, &wb.moments, &EstimatorConfig::new(Method::Kras, lh, 0.01, k.clone(), k.clone())).unwrap();
            let norm = f.rkhs_norm();
            prop_assert!(norm <= last * (1.0 + 1e-9), "norm rose from {last} to {norm} at lambda {lh}");
            last = norm;
            if j == 0 {
                norm_at_first = norm;
                let b = bound_share * norm;
                prop_assert!(constrain_norm(&f, b).unwrap().rkhs_norm() <= b * (1.0 + 1e-6));
            }
        }
        prop_assert!(norm_at_first > 0.0);
    }

    #[test]
    fn exact_power_laws_are_recovered(exponent in -3.0..3.0f64, scale in 0.01..100.0f64) {
        let pts: Vec<(f64, f64)> = [0.3, 0.2, 0.1, 0.05, 0.02].iter().map(|&x: &f64| (x, scale * x.powf(exponent))).collect();
        let pl = fit_power_law(&pts).unwrap();
        prop_assert!((pl.slope - exponent).abs() <= 1e-10);
        prop_assert!((pl.r_squared - 1.0).abs() <= 1e-10 || exponent.abs() < 1e-9);
    }

    #[test]
    fn kappa_grows_with_n(delta in 0.01..0.9f64, b in 0.5..3.0f64, n in 1usize..100_000, step in 1usize..100_000) {
        let a = theory_envelope(delta, 0.1, 0.01, 1.0, b, n).unwrap().kappa;
        let c = theory_envelope(delta, 0.1, 0.01, 1.0, b, n + step).unwrap().kappa;
        prop_assert!(c >= a);
    }

    #[test]
    fn isometry_of_the_square_root(n in 2usize..20, seed in 0u64..1000) {
        let dgp = law(n, 4, 1, seed);
        let k = KernelSpec::gaussian(0.7);
        let s = operator_sqrt(&kernel_integral_operator(&dgp, &k, Side::W).unwrap()).unwrap();
        let f = DVector::from_fn(n, |i, _| ((i * 7 + seed as usize) as f64).cos());
        let h = kras::workbench::rkhs_norm_of_values(&k, &dgp.w_points(), &s.apply(&f)).unwrap();
        let l2 = weighted_norm(&f, &dgp.p_w());
        prop_assert!((h - l2).abs() <= 1e-10 * l2.max(1.0), "{h} vs {l2}");
    }
}
