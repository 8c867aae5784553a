use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use spanel::netsim::OutcomeSpec;
use spanel::{evaluate_moments, helmert_weights, moment_jacobian, InstrumentSource, MomentSet, QuadKind};

mod common;
use common::*;

fn general_setup() -> (Setup, spanel::ModelSpec) {
    let w = ring_weights(40, 2);
    let out = OutcomeSpec {
        lambda: 0.3,
        beta: [1.0, -0.5],
        rho: Some(0.2),
        f: vec![1.0, 0.7, 1.0],
        sigma2: vec![1.0, 1.3, 1.0],
        varrho2: None,
    };
    let model = example_spec(1, true);
    let mut s = setup(&w, &out, &model, vec![QuadKind::Sym, QuadKind::Gram], 8);
    s.template.f = out.f.clone();
    s.template.gamma_sigma = out.sigma2.clone();
    (s, model)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jacobian_matches_central_differences(
        lambda in -0.6f64..0.6, b1 in -1.5f64..1.5, b2 in -1.5f64..1.5,
        rho in -0.6f64..0.6, f1 in 0.5f64..1.5, f2 in 0.5f64..1.5,
    ) {
        let (s, model) = general_setup();
        let theta = vec![lambda, b1, b2, rho, f1, f2];
        let jac = moment_jacobian(&model.apply_theta(&s.template, &theta), &s.data, &s.moments).unwrap();
        let eval = |th: &[f64]| evaluate_moments(&model.apply_theta(&s.template, th), &s.data, &s.moments).unwrap().m;
        let mut fd = DMatrix::zeros(jac.nrows(), jac.ncols());
        for k in 0..theta.len() {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            fd.set_column(k, &((eval(&up) - eval(&dn)) / (2.0 * h)));
        }
        prop_assert!((&jac - &fd).amax() / fd.amax() < 1e-6);
    }

    #[test]
    fn moments_are_quadratic_along_delta(d0 in -1.0f64..1.0, d1 in -1.0f64..1.0, d2 in -1.0f64..1.0, rho in -0.5f64..0.5) {
        let (s, model) = general_setup();
        let at = |step: f64| {
            let th = [0.1 + step * d0, 0.5 + step * d1, -0.3 + step * d2, rho, 0.9, 1.1];
            evaluate_moments(&model.apply_theta(&s.template, &th), &s.data, &s.moments).unwrap().m
        };
        let predicted = at(-1.0) - at(0.0) * 3.0 + at(1.0) * 3.0;
        let actual = at(2.0);
        prop_assert!((predicted - &actual).amax() <= 1e-10 * actual.amax().max(1.0));
    }
}

#[test]
fn moments_are_not_jointly_quadratic_in_delta_and_rho() {
    let (s, model) = general_setup();
    let at = |step: f64| {
        let th = [0.1 + 0.3 * step, 0.5, -0.3, 0.1 + 0.3 * step, 0.9, 1.1];
        evaluate_moments(&model.apply_theta(&s.template, &th), &s.data, &s.moments).unwrap().m
    };
    let predicted = at(-1.0) - at(0.0) * 3.0 + at(1.0) * 3.0;
    let actual = at(2.0);
    assert!((predicted - &actual).amax() > 1e-6 * actual.amax());
}

#[test]
fn moments_have_mean_zero_at_the_truth() {
    let w = ring_weights(80, 2);
    let out = OutcomeSpec::simple(0.4, [1.0, 0.5], 3);
    let model = example_spec(0, false);
    let reps = 400;
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(reps);
    for seed in 0..reps as u64 {
        let s = setup(&w, &out, &model, vec![QuadKind::Sym, QuadKind::Gram], 1000 + seed);
        let th = model.apply_theta(&s.template, &[0.4, 1.0, 0.5]);
        draws.push(evaluate_moments(&th, &s.data, &s.moments).unwrap().m);
    }
    let k = draws[0].len();
    for j in 0..k {
        let v: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        let mean = v.iter().sum::<f64>() / reps as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(mean.abs() < 4.0 * sd / (reps as f64).sqrt(), "moment {j}: mean {mean}, sd {sd}");
    }
}

#[test]
fn current_period_instruments_are_powers_of_the_weights() {
    let w = ring_weights(30, 1);
    let s = setup(&w, &OutcomeSpec::simple(0.3, [1.0, 0.2], 3), &example_spec(0, false), vec![], 2);
    let mut spec = moment_spec(vec![]);
    spec.instruments.source = InstrumentSource::Current;
    let transform = helmert_weights(&[1.0; 3], &[1.0; 3]).unwrap();
    let ms = MomentSet::build(&s.panel, &spec, &transform, 3).unwrap();
    assert_eq!(ms.periods(), 2);
    for (t, block) in ms.blocks().iter().enumerate() {
        let z = s.panel.z_at(t).column(0).into_owned();
        let mz = w.mul_vec(&z);
        let m2z = w.mul_vec(&mz);
        assert_eq!(block.h.ncols(), 3);
        for (c, expected) in [z, mz, m2z].iter().enumerate() {
            assert!((block.h.column(c) - expected).amax() < 1e-12);
        }
    }
}
