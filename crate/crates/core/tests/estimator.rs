use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use spanel::estimator::{fit_quadratic, quadratic_roots, sandwich_psi, tsls_estimate, wald_from_parts};
use spanel::montecarlo::{estimate_gmm, prepare, McConfig};
use spanel::netsim::OutcomeSpec;
use spanel::{gmm_estimate, EstimatorConfig, GmmWeights, McDesign};

mod common;
use common::*;

/// 2SLS on the stacked two-period forward difference, computed from scratch.
fn tsls_oracle(s: &Setup, m: &spanel::SpatialWeightMatrix) -> DVector<f64> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let n = s.panel.n();
    let y = |t: usize| s.panel.y_at(t);
    let z = |t: usize| s.panel.z_at(t).column(0).into_owned();
    let w_t = |t: usize| {
        let mut w = DMatrix::zeros(n, 3);
        w.set_column(0, &m.mul_vec(&y(t)));
        w.set_column(1, &z(t));
        w.set_column(2, &m.mul_vec(&z(t)));
        w
    };
    let yp = (y(0) - y(1)) * r;
    let wp = (w_t(0) - w_t(1)) * r;
    let h = &s.moments.blocks()[0].h;
    let hth = (h.transpose() * h).try_inverse().unwrap();
    let hw = h.transpose() * &wp;
    let lhs = hw.transpose() * &hth * &hw;
    let rhs = hw.transpose() * &hth * (h.transpose() * yp);
    lhs.lu().solve(&rhs).unwrap()
}

#[test]
fn linear_gmm_equals_closed_form_tsls() {
    let w = ring_weights(150, 2);
    for seed in 0..4 {
        let s = setup(&w, &OutcomeSpec::simple(0.3, [1.0, 0.8], 2), &example_spec(0, false), vec![], 60 + seed);
        let lin = s.moments.linear_only();
        let oracle = tsls_oracle(&s, &w);
        let tsls = tsls_estimate(&s.data, &lin, &s.template).unwrap();
        let cfg = EstimatorConfig {
            lambda_bounds: [-10.0, 10.0],
            ..EstimatorConfig::default()
        };
        let gmm = gmm_estimate(&s.data, &lin, &GmmWeights::optimal(&lin, false).unwrap(), &s.template, &[], &cfg).unwrap();
        for k in 0..3 {
            assert!((tsls[k] - oracle[k]).abs() < 1e-10, "tsls {k}: {} vs {}", tsls[k], oracle[k]);
            assert!((gmm.theta[k] - oracle[k]).abs() < 1e-8, "gmm {k}: {} vs {}", gmm.theta[k], oracle[k]);
        }
    }
}

#[test]
fn gmm_is_close_to_the_truth_in_large_samples() {
    let config = McConfig::default();
    let mut errors: Vec<f64> = (0..5)
        .map(|rep| {
            let prep = prepare(&McDesign::new(1000, 0.5, 0.3, 5, 321), rep, &config).unwrap();
            let r = estimate_gmm(&prep, &config).unwrap();
            assert!(r.converged);
            (r.theta[0] - 0.5).abs()
        })
        .collect();
    errors.sort_by(f64::total_cmp);
    assert!(errors[2] < 0.1, "median |error| {}", errors[2]);
}

#[test]
fn efficient_step_never_raises_its_own_criterion() {
    let config = McConfig::default();
    let prep = prepare(&McDesign::new(300, 0.5, 0.3, 1, 99), 0, &config).unwrap();
    let est = EstimatorConfig::default();
    let (first, second) = spanel::efficient_gmm(&prep.data, &prep.moments, &prep.template, &est).unwrap();
    assert!(second.converged && first.converged);
    // the second step minimizes with `xi`, so its optimum beats the first-step point under that weight
    let at_first = spanel::estimator::objective_and_gradient(&first.theta, &prep.template, &prep.data, &prep.moments, &second.xi)
        .unwrap()
        .0;
    assert!(second.objective <= at_first + 1e-12);
    assert!(second.psi_hat.is_some());
}

fn spd(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = spanel::rng::stream(seed, 0, 0);
    let a = DMatrix::from_fn(k, k, |_, _| uniform(&mut rng, -1.0, 1.0));
    &a * a.transpose() + DMatrix::identity(k, k) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sandwich_with_efficient_weights_collapses(seed in any::<u64>()) {
        let v = spd(5, seed);
        let mut rng = spanel::rng::stream(seed, 1, 0);
        let g = DMatrix::from_fn(5, 3, |_, _| uniform(&mut rng, -1.0, 1.0));
        let xi = v.clone().try_inverse().unwrap();
        let psi = sandwich_psi(&g, &xi, &v).unwrap();
        let direct = (g.transpose() * &xi * &g).try_inverse().unwrap();
        prop_assert!((&psi - &direct).amax() <= 1e-8 * direct.amax());
    }

    #[test]
    fn wald_statistic_ignores_row_scaling(seed in any::<u64>(), c in 0.01f64..100.0) {
        let psi = spd(3, seed);
        let theta = [0.4, -1.2, 0.7];
        let r = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, -1.0]);
        let rhs = [0.2, 0.3];
        let a = wald_from_parts(&theta, &psi, 250, &r, &rhs).unwrap();
        let b = wald_from_parts(&theta, &psi, 250, &(&r * c), &[rhs[0] * c, rhs[1] * c]).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() <= 1e-9 * a.statistic.max(1.0));
        prop_assert_eq!(a.dof, 2);
        prop_assert!((0.0..=1.0).contains(&a.p_value));
    }

    #[test]
    fn quadratic_fit_and_roots(c0 in -3.0f64..3.0, c1 in -3.0f64..3.0, c2 in 0.1f64..3.0) {
        let p = |x: f64| c0 + c1 * x + c2 * x * x;
        let (a0, a1, a2) = fit_quadratic(p(-1.0), p(0.0), p(1.0));
        prop_assert!((a0 - c0).abs() < 1e-12 && (a1 - c1).abs() < 1e-12 && (a2 - c2).abs() < 1e-12);
        let disc = c1 * c1 - 4.0 * c0 * c2;
        let roots = quadratic_roots(c0, c1, c2);
        if disc < -1e-9 {
            prop_assert!(roots.is_empty());
        }
        for x in roots {
            prop_assert!(p(x).abs() < 1e-8 * (1.0 + x * x));
        }
    }
}
