use proptest::prelude::*;

use dualexp::functionals::{linear_terminal, quadratic_terminal};
use dualexp::oracle::quadrature::gauss_hermite;
use dualexp::oracle::{linear_control_value, quadratic_control_value};
use dualexp::{basis_risk_2d, control_value_expansion, BasisRiskParams, BrownianEnsemble, ExpansionOptions, TimeGrid};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hermite_rules_are_probability_rules(n in 7usize..=15) {
        let r = gauss_hermite(n).unwrap();
        let mass: f64 = r.weights.iter().sum();
        let mean: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| x * w).sum();
        let var: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| x * x * w).sum();
        prop_assert!((mass - 1.0).abs() < 1e-12);
        prop_assert!(mean.abs() < 1e-12);
        prop_assert!((var - 1.0).abs() < 1e-11);
    }

    #[test]
    fn paths_are_addressable_and_consistent(seed in any::<u64>(), steps in 1usize..40, i in 0usize..500) {
        let ens = BrownianEnsemble::generate(2, TimeGrid::new(1.0, steps).unwrap(), 500, seed).unwrap();
        let mut a = ens.new_path();
        let mut b = ens.new_path();
        ens.fill(i, &mut a).unwrap();
        ens.fill((i + 1) % 500, &mut b).unwrap();
        ens.fill(i, &mut b).unwrap();
        prop_assert_eq!(a.terminal(), b.terminal());
        for l in 0..2 {
            let sum: f64 = (0..steps).map(|k| a.increment(k)[l]).sum();
            prop_assert!((sum - a.terminal()[l]).abs() < 1e-12 * (1.0 + sum.abs()));
        }
    }

    #[test]
    fn admissible_projection_is_idempotent_and_shrinks(
        rho in -0.99f64..0.99,
        sigma_s in 0.05f64..0.8,
        s in 10.0f64..300.0,
        y in 10.0f64..300.0,
        raw in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let m = basis_risk_2d(BasisRiskParams { mu_s: 0.05, sigma_s, mu_y: 0.03, sigma_y: 0.3, rho, s0: 100.0, y0: 100.0 }).unwrap();
        let p = m.project_admissible(0.3, &[s], &[y], &raw).unwrap();
        let p2 = m.project_admissible(0.3, &[s], &[y], &p).unwrap();
        for (u, v) in p.iter().zip(&p2) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm(&p) <= norm(&raw) + 1e-12);
        // what was removed is orthogonal to what was kept
        let dot: f64 = p.iter().zip(&raw).map(|(u, r)| u * (r - u)).sum();
        prop_assert!(dot.abs() < 1e-10);
    }

    #[test]
    fn closed_forms_dominate_the_mean(eps in 0.0f64..0.7, t in 0.1f64..1.0, c in prop::collection::vec(-3.0f64..3.0, 1..4)) {
        prop_assert!(linear_control_value(&c, eps, t) >= 0.0);
        if 2.0 * eps * eps * t < 1.0 {
            let q = quadratic_control_value(eps, t).unwrap();
            prop_assert!(q >= t - 1e-12);
            prop_assert!(q <= quadratic_control_value(eps * 1.01, t).unwrap_or(f64::INFINITY) + 1e-12);
        } else {
            prop_assert!(quadratic_control_value(eps, t).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn expansion_report_is_additive_and_quadratic_in_eps(seed in any::<u64>(), eps in 0.01f64..0.3, quadratic in any::<bool>()) {
        let ens = BrownianEnsemble::generate(1, TimeGrid::new(1.0, 8).unwrap(), 2000, seed).unwrap();
        let opts = ExpansionOptions::default();
        let (a, b) = if quadratic {
            let c = quadratic_terminal(1).unwrap();
            (control_value_expansion(&c, &ens, eps, &opts).unwrap(), control_value_expansion(&c, &ens, 2.0 * eps, &opts).unwrap())
        } else {
            let c = linear_terminal(vec![1.5]).unwrap();
            (control_value_expansion(&c, &ens, eps, &opts).unwrap(), control_value_expansion(&c, &ens, 2.0 * eps, &opts).unwrap())
        };
        prop_assert_eq!(a.total, a.zeroth.value + a.correction.value);
        prop_assert!(a.correction.value >= 0.0);
        prop_assert!(a.zeroth.se > 0.0 && a.correction.se >= 0.0);
        prop_assert_eq!(a.zeroth.value, b.zeroth.value);
        prop_assert!((b.correction.value - 4.0 * a.correction.value).abs() <= 1e-12 * b.correction.value.abs());
    }
}
