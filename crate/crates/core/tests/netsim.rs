use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use spanel::netsim::{draw_locations, feasible_partners, form_connected_network, form_network, simulate_replication, UpsilonDist};
use spanel::{McDesign, NetworkParams};

fn network_inputs(n: usize, seed: u64, width: f64) -> (DMatrix<f64>, DVector<f64>) {
    let zeta = draw_locations(n, width, &mut spanel::rng::stream(seed, 0, 1));
    let mut r = spanel::rng::stream(seed, 0, 2);
    let mu = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
    (DMatrix::from_column_slice(n, 1, zeta.as_slice()), mu)
}

fn params_strategy() -> impl Strategy<Value = NetworkParams> {
    (-2.0f64..3.0, -0.5f64..0.2, -0.5f64..0.2, 2.0f64..15.0, prop::bool::ANY).prop_map(|(a0, az, am, c, normal)| NetworkParams {
        alpha0: a0,
        alpha_zeta: vec![az],
        alpha_mu: am,
        cutoff: c,
        upsilon: if normal { UpsilonDist::Normal } else { UpsilonDist::Logistic },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn networks_are_simple_graphs_on_feasible_pairs(params in params_strategy(), n in 2usize..60, seed in any::<u64>()) {
        let (zeta, mu) = network_inputs(n, seed, 2.0);
        let d = form_network(&params, &zeta, &mu, &mut spanel::rng::stream(seed, 0, 3)).unwrap();
        let partners = feasible_partners(&zeta, params.cutoff);
        prop_assert!(d.is_symmetric());
        for (i, j, v) in d.iter() {
            prop_assert_ne!(i, j);
            prop_assert_eq!(v, 1.0);
            prop_assert!((zeta[(i, 0)] - zeta[(j, 0)]).abs() < params.cutoff);
            prop_assert!(partners[i].binary_search(&j).is_ok());
        }
    }

    #[test]
    fn repaired_networks_have_no_isolated_units(params in params_strategy(), n in 2usize..60, seed in any::<u64>()) {
        let (zeta, mu) = network_inputs(n, seed, 2.0);
        let (d, log) = form_connected_network(
            &params, &zeta, &mu,
            &mut spanel::rng::stream(seed, 0, 3),
            &mut spanel::rng::stream(seed, 0, 4),
        ).unwrap();
        prop_assert!(d.is_symmetric());
        prop_assert!(d.row_sums().iter().all(|&s| s >= 1.0));
        prop_assert!(log.attached <= log.redrawn);
        prop_assert_eq!(d.max_abs_diagonal(), 0.0);
    }
}

#[test]
fn link_count_matches_its_expectation() {
    let n = 60;
    let params = NetworkParams::default();
    let (zeta, mu) = network_inputs(n, 8, 2.0);
    let mut expected = 0.0;
    let mut var = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dz = zeta[(i, 0)] - zeta[(j, 0)];
            if dz.abs() < params.cutoff {
                let p = params.link_probability(&[dz], mu[i] - mu[j]);
                expected += p;
                var += p * (1.0 - p);
            }
        }
    }
    let draws = 500;
    let total: usize = (0..draws)
        .map(|k| form_network(&params, &zeta, &mu, &mut spanel::rng::stream(8, k, 9)).unwrap().nnz() / 2)
        .sum();
    let mean = total as f64 / draws as f64;
    let se = (var / draws as f64).sqrt();
    assert!((mean - expected).abs() < 4.0 * se, "mean links {mean}, expected {expected}, se {se}");
}

#[test]
fn outcomes_satisfy_the_structural_equation() {
    let design = McDesign::new(1500, 0.5, 0.3, 1, 4);
    let sim = simulate_replication(&design, 0).unwrap();
    let m = &sim.m;
    assert!(m.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-12));
    let mut resid = Vec::new();
    for t in 0..design.periods {
        let y = sim.panel.y_at(t);
        let z = sim.panel.z_at(t).column(0).into_owned();
        assert_eq!(sim.panel.z_at(t).column(1), sim.zeta.column(0));
        let u = &y - m.mul_vec(&y) * design.lambda0 - &z * design.beta1 - m.mul_vec(&z) * design.beta2() - &sim.mu;
        resid.extend(u.iter().copied());
    }
    let k = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / k;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0);
    assert!(mean.abs() < 4.0 / k.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 4.0 * (2.0 / k).sqrt(), "variance {var}");
}

#[test]
fn replications_are_reproducible_and_distinct() {
    let design = McDesign::new(80, 0.1, 0.5, 3, 12);
    let a = simulate_replication(&design, 1).unwrap();
    let b = simulate_replication(&design, 1).unwrap();
    let c = simulate_replication(&design, 2).unwrap();
    assert_eq!(a.panel.y(), b.panel.y());
    assert_eq!(a.adjacency, b.adjacency);
    assert_ne!(a.panel.y(), c.panel.y());
}
