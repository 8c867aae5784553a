#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use spanel::netsim::{generate_outcomes, OutcomeSpec};
use spanel::rng::stream;
use spanel::{
    helmert_weights, CsrMatrix, DesignSpec, InstrumentSource, InstrumentSpec, ModelData, ModelSpec, MomentSet,
    MomentSpec, PanelData, ParamVector, QuadKind, Regressor, SpatialWeightMatrix, Variable,
};

/// Row-normalized ring where each unit links to its `k` nearest neighbors on each side.
pub fn ring_weights(n: usize, k: usize) -> Arc<SpatialWeightMatrix> {
    let mut trip = Vec::new();
    for i in 0..n {
        for d in 1..=k {
            trip.push((i, (i + d) % n, 0.5 / k as f64));
            trip.push((i, (i + n - d) % n, 0.5 / k as f64));
        }
    }
    Arc::new(SpatialWeightMatrix::new(CsrMatrix::from_triplets(n, &trip).unwrap()).unwrap())
}

/// Block-diagonal `(ee' - I) / (m - 1)` over groups of `m` consecutive units.
pub fn equal_groups(n: usize, m: usize) -> Arc<SpatialWeightMatrix> {
    assert_eq!(n % m, 0);
    let mut trip = Vec::new();
    for g in 0..n / m {
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    trip.push((g * m + a, g * m + b, 1.0 / (m - 1) as f64));
                }
            }
        }
    }
    Arc::new(SpatialWeightMatrix::new(CsrMatrix::from_triplets(n, &trip).unwrap()).unwrap())
}

/// Symmetric ring adjacency inside each group of `m` consecutive units.
pub fn within_group_ring(n: usize, m: usize) -> CsrMatrix {
    let mut trip = Vec::new();
    for g in 0..n / m {
        for a in 0..m {
            let b = (a + 1) % m;
            trip.push((g * m + a, g * m + b, 0.5));
            trip.push((g * m + b, g * m + a, 0.5));
        }
    }
    CsrMatrix::from_triplets(n, &trip).unwrap()
}

/// `W_t = [M y_t, z_t, M z_t]`.
pub fn example_spec(error_lags: usize, estimate_factor: bool) -> ModelSpec {
    ModelSpec {
        design: DesignSpec {
            spatial_lags: 1,
            regressors: vec![Regressor::own(Variable::Z(0)), Regressor::lagged(Variable::Z(0), 0)],
        },
        error_lags,
        estimate_factor,
    }
}

pub fn moment_spec(quadratic: Vec<QuadKind>) -> MomentSpec {
    MomentSpec {
        instruments: InstrumentSpec {
            variables: vec![Variable::Z(0)],
            max_order: 2,
            source: InstrumentSource::Transformed,
            weight: 0,
        },
        quadratic,
        quadratic_weight: 0,
    }
}

pub fn simulate(m: &Arc<SpatialWeightMatrix>, spec: &OutcomeSpec, seed: u64) -> PanelData {
    let n = m.dim();
    let mut r = stream(seed, 0, 1);
    let mu = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    generate_outcomes(m, spec, &mu, None, &mut stream(seed, 0, 4)).unwrap()
}

/// Panel, model data and moments for the example model on weight matrix `m`.
pub struct Setup {
    pub panel: PanelData,
    pub data: ModelData,
    pub moments: MomentSet,
    pub template: ParamVector,
}

pub fn setup(
    m: &Arc<SpatialWeightMatrix>,
    spec: &OutcomeSpec,
    model: &ModelSpec,
    quadratic: Vec<QuadKind>,
    seed: u64,
) -> Setup {
    let panel = simulate(m, spec, seed);
    let periods = spec.f.len();
    let data = ModelData::new(&panel, model).unwrap();
    let transform = helmert_weights(&vec![1.0; periods], &vec![1.0; periods]).unwrap();
    let moments = MomentSet::build(&panel, &moment_spec(quadratic), &transform, 2).unwrap();
    let rho = vec![0.0; model.error_lags];
    let template = ParamVector::new(vec![0.0], vec![0.0, 0.0], rho, periods, m.dim());
    Setup {
        panel,
        data,
        moments,
        template,
    }
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
