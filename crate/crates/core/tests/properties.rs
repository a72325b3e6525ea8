use ergolq::coefficients::{builtin_scenario, catalog_names, CoefficientFn, FeedbackLaw, PathPoint};
use ergolq::ergodic::{evaluate_running_cost, suggested_k_burn, ReducedCostForm};
use ergolq::oracle::algebraic_riccati_scalar;
use ergolq::sde::{derive_seed, PathBundle};
use ergolq::Mat;
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| {
        let r: Vec<Vec<f64>> = v.chunks(cols).map(<[f64]>::to_vec).collect();
        Mat::from_rows(&r)
    })
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_transpose((a, b) in dims().prop_flat_map(|(n, k, m)| (mat(n, k), mat(k, m)))) {
        let lhs = (a * b).transpose();
        let rhs = b.transpose() * a.transpose();
        prop_assert!((lhs - rhs).max_abs() < 1e-12);
    }

    #[test]
    fn spd_solve_and_quadratic_form(l in mat(3, 3), x in mat(3, 1)) {
        let spd = l * l.transpose() + Mat::identity(3);
        let y = spd.solve(&x).unwrap();
        prop_assert!((spd * y - x).max_abs() < 1e-9 * (1.0 + x.max_abs()));
        prop_assert!(spd.quad_form(&x) >= 0.0);
        prop_assert!(spd.min_eigenvalue() >= 1.0 - 1e-9);
        prop_assert!((spd.symmetrize() - spd).max_abs() < 1e-12);
    }

    #[test]
    fn riccati_root_solves_the_equation(a in -2.0f64..1.0, b in 0.2f64..2.0, c in 0.0f64..1.0, q in 0.1f64..3.0, r in 0.2f64..3.0) {
        let k = algebraic_riccati_scalar(a, b, c, q, 0.0, r).unwrap();
        prop_assert!(k > 0.0);
        let defect = (2.0 * a + c * c) * k + q - k * k * b * b / r;
        prop_assert!(defect.abs() < 1e-9 * (1.0 + k * k));
        // The optimal closed loop is mean-square stable.
        let a_cl = a - b * b * k / r;
        prop_assert!(2.0 * a_cl + c * c < 0.0);
    }

    #[test]
    fn paths_do_not_depend_on_bundle_size(seed in any::<u64>(), i in 0usize..20, extra in 1usize..50) {
        let small = PathBundle::new(1.0, 16, 2, 20, seed).unwrap();
        let large = PathBundle { n_paths: 20 + extra, ..small };
        prop_assert_eq!(small.path(i), large.path(i));
        let anti = small.with_antithetic(true);
        let even = anti.path(2 * (i / 2));
        let odd = anti.path(2 * (i / 2) + 1);
        prop_assert!(even.iter().zip(&odd).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn stage_seeds_are_distinct(seed in any::<u64>()) {
        let labels = ["stability", "burn-in", "single-period", "long-run", "regression", "value"];
        let seeds: Vec<u64> = labels.iter().map(|l| derive_seed(seed, l)).collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                prop_assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn burn_in_shrinks_with_faster_decay(l1 in 0.01f64..10.0, f in 1.0f64..5.0, tau in 0.1f64..3.0) {
        let slow = suggested_k_burn(l1, tau).unwrap();
        let fast = suggested_k_burn(l1 * f, tau).unwrap();
        prop_assert!(fast <= slow);
        prop_assert!(fast >= 3);
        prop_assert!(slow as f64 * l1 * tau >= 20.0 || slow == 3);
    }

    #[test]
    fn reduced_cost_matches_running_cost(
        idx in 0usize..5,
        phase in 0.0f64..1.0,
        prefix in proptest::collection::vec(-0.3f64..0.3, 0..8),
        gain in -2.0f64..2.0,
        amp in -1.0f64..1.0,
        offset in -1.0f64..1.0,
        xs in proptest::collection::vec(-4.0f64..4.0, 2),
    ) {
        let set = builtin_scenario(catalog_names()[idx]).unwrap();
        let theta = CoefficientFn::tanh_of_increments(Mat::filled(set.m, set.n, gain), Mat::filled(set.m, set.n, amp), 1.0).unwrap();
        let fb = FeedbackLaw::new("p", theta, CoefficientFn::constant(Mat::filled(set.m, 1, offset)));
        let form = ReducedCostForm::new(&set, &fb).unwrap();
        let phase = phase * set.tau * 0.999;
        let p = PathPoint::new(phase, &prefix);
        let x = Mat::column(&xs[..set.n]);
        let u = fb.theta.at(&p) * x + fb.v.at(&p);
        let direct = evaluate_running_cost(&set, &x, &u, phase, &prefix).unwrap();
        prop_assert!((form.eval(&p, &x) - direct).abs() < 1e-9 * (1.0 + direct.abs()));
    }

    #[test]
    fn coefficients_are_bounded_and_positive(idx in 0usize..5, phase in 0.0f64..1.0, prefix in proptest::collection::vec(-0.5f64..0.5, 0..16)) {
        let set = builtin_scenario(catalog_names()[idx]).unwrap();
        let p = PathPoint::new(phase * set.tau * 0.999, &prefix);
        for (name, f) in set.coefficients() {
            prop_assert!(f.at(&p).max_abs() <= f.bound() + 1e-12, "{} exceeds its bound", name);
        }
        let c = set.sample(&p);
        prop_assert!(c.r.min_eigenvalue() > 0.0);
        let r_inv_s = c.r.solve(&c.s).unwrap();
        prop_assert!((c.q - c.s.transpose() * r_inv_s).symmetrize().min_eigenvalue() > -1e-12);
    }
}
