//! Replication engine for the simulation grid and the Wald coverage experiment.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimator::{efficient_gmm, gmm_estimate, ols_estimate, tsls_estimate, wald_test, EstimatorConfig, GmmResult, GmmWeights};
use crate::moments::{InstrumentSource, InstrumentSpec, ModelData, ModelSpec, MomentSet, MomentSpec, QuadKind};
use crate::netsim::{simulate_replication, McDesign, SimulatedPanel};
use crate::panel::{DesignSpec, ParamVector, Regressor, Variable};
use crate::transform::helmert_weights;

pub use rayon::ThreadPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    Ols,
    Iv,
    Gmm,
}

impl McEstimator {
    pub const ALL: [McEstimator; 3] = [McEstimator::Ols, McEstimator::Iv, McEstimator::Gmm];

    pub fn name(self) -> &'static str {
        match self {
            McEstimator::Ols => "ols",
            McEstimator::Iv => "iv",
            McEstimator::Gmm => "gmm",
        }
    }
}

/// Half-width of the lambda box in the simulation defaults; wide enough to
/// never bind, so small-sample estimates are not truncated at the unit circle.
pub const TABLE_LAMBDA_BOX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McWeighting {
    /// `Xi = V~^{-1}` at the true variance components.
    #[default]
    Optimal,
    /// `Xi = I`.
    Identity,
    /// `Xi = I` first step, then `V~^{-1}` started from it.
    TwoStep,
}

/// Moment and estimator choices shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub instrument_source: InstrumentSource,
    /// Highest power of `M` applied to `z` in the instruments.
    pub max_order: usize,
    pub quadratic: Vec<QuadKind>,
    pub weighting: McWeighting,
    pub estimator: EstimatorConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            instrument_source: InstrumentSource::Current,
            max_order: 2,
            quadratic: vec![QuadKind::Sym, QuadKind::Gram],
            weighting: McWeighting::Identity,
            estimator: EstimatorConfig {
                lambda_bounds: [-TABLE_LAMBDA_BOX, TABLE_LAMBDA_BOX],
                ..EstimatorConfig::default()
            },
        }
    }
}

/// Design matrices `W_t = [M y_t, z_t, M z_t]`.
pub fn example_model_spec() -> ModelSpec {
    ModelSpec {
        design: DesignSpec {
            spatial_lags: 1,
            regressors: vec![Regressor::own(Variable::Z(0)), Regressor::lagged(Variable::Z(0), 0)],
        },
        error_lags: 0,
        estimate_factor: false,
    }
}

/// Everything needed to estimate one simulated panel.
pub struct PreparedReplication {
    pub sim: SimulatedPanel,
    pub data: ModelData,
    pub moments: MomentSet,
    pub template: ParamVector,
}

pub fn prepare(design: &McDesign, rep: u64, config: &McConfig) -> Result<PreparedReplication> {
    let sim = simulate_replication(design, rep)?;
    let spec = example_model_spec();
    let data = ModelData::new(&sim.panel, &spec)?;
    let periods = design.periods;
    let transform = helmert_weights(&vec![1.0; periods], &vec![1.0; periods])?;
    let mspec = MomentSpec {
        instruments: InstrumentSpec {
            variables: vec![Variable::Z(0)],
            max_order: config.max_order,
            source: config.instrument_source,
            weight: 0,
        },
        quadratic: config.quadratic.clone(),
        quadratic_weight: 0,
    };
    let moments = MomentSet::build(&sim.panel, &mspec, &transform, 2)?;
    let template = ParamVector::new(vec![0.0], vec![0.0, 0.0], vec![], periods, design.n);
    Ok(PreparedReplication {
        sim,
        data,
        moments,
        template,
    })
}

/// GMM on a prepared replication with the configured weighting.
pub fn estimate_gmm(prep: &PreparedReplication, config: &McConfig) -> Result<GmmResult> {
    let allow = config.estimator.allow_pseudo_inverse;
    match config.weighting {
        McWeighting::Optimal => {
            let weights = GmmWeights::optimal(&prep.moments, allow)?;
            gmm_estimate(&prep.data, &prep.moments, &weights, &prep.template, &[], &config.estimator)
        }
        McWeighting::Identity => {
            let weights = GmmWeights::identity(&prep.moments, allow)?;
            gmm_estimate(&prep.data, &prep.moments, &weights, &prep.template, &[], &config.estimator)
        }
        McWeighting::TwoStep => efficient_gmm(&prep.data, &prep.moments, &prep.template, &config.estimator).map(|(_, s2)| s2),
    }
}

/// Lambda estimates of one replication, `None` where the estimator failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replication: u64,
    pub estimates: Vec<(McEstimator, Option<f64>)>,
}

pub fn run_replication(design: &McDesign, rep: u64, config: &McConfig, estimators: &[McEstimator]) -> ReplicationOutcome {
    let prep = match prepare(design, rep, config) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("replication {rep}: simulation failed: {e}");
            return ReplicationOutcome {
                replication: rep,
                estimates: estimators.iter().map(|&e| (e, None)).collect(),
            };
        }
    };
    let estimates = estimators
        .iter()
        .map(|&est| {
            let value = match est {
                McEstimator::Ols => ols_estimate(&prep.data, &prep.template).map(|d| d[0]),
                McEstimator::Iv => {
                    let lin = prep.moments.linear_only();
                    if lin.n_linear() < prep.data.spec().n_delta() {
                        Err(Error::RankDeficientInstruments {
                            available: lin.n_linear(),
                            required: prep.data.spec().n_delta(),
                        })
                    } else {
                        tsls_estimate(&prep.data, &lin, &prep.template).map(|d| d[0])
                    }
                }
                McEstimator::Gmm => estimate_gmm(&prep, config).and_then(|r| {
                    if r.converged {
                        Ok(r.theta[0])
                    } else {
                        Err(Error::DidNotConverge {
                            iterations: r.iterations,
                            gradient: r.gradient_norm,
                        })
                    }
                }),
            };
            match value {
                Ok(v) if v.is_finite() => (est, Some(v)),
                Ok(_) => (est, None),
                Err(e) => {
                    log::debug!("replication {rep}, {}: {e}", est.name());
                    (est, None)
                }
            }
        })
        .collect();
    ReplicationOutcome {
        replication: rep,
        estimates,
    }
}

/// Median of `values` (mean of the two middle order statistics for even length).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn median_bias(estimates: &[f64], truth: f64) -> f64 {
    median(estimates) - truth
}

/// Mean absolute error around `truth`.
pub fn mae(estimates: &[f64], truth: f64) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    estimates.iter().map(|e| (e - truth).abs()).sum::<f64>() / estimates.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub median_bias: f64,
    pub mae: f64,
    pub n_success: usize,
    pub n_fail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n: usize,
    pub lambda0: f64,
    pub delta: f64,
    pub replications: usize,
    pub estimators: Vec<(McEstimator, EstimatorSummary)>,
}

impl McSummary {
    pub fn get(&self, est: McEstimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|(e, _)| *e == est).map(|(_, s)| s)
    }
}

pub fn summarize(design: &McDesign, outcomes: &[ReplicationOutcome], estimators: &[McEstimator]) -> McSummary {
    let summaries = estimators
        .iter()
        .enumerate()
        .map(|(k, &est)| {
            let ok: Vec<f64> = outcomes.iter().filter_map(|o| o.estimates[k].1).collect();
            let s = EstimatorSummary {
                median_bias: median_bias(&ok, design.lambda0),
                mae: mae(&ok, design.lambda0),
                n_success: ok.len(),
                n_fail: outcomes.len() - ok.len(),
            };
            (est, s)
        })
        .collect();
    McSummary {
        n: design.n,
        lambda0: design.lambda0,
        delta: design.delta,
        replications: outcomes.len(),
        estimators: summaries,
    }
}

/// Thread pool with `workers` threads (all available cores when `None`).
pub fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    b.build().map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

/// Runs every replication of `design` on `pool`; results are gathered in
/// replication order, so the summary does not depend on the worker count.
pub fn run_design_outcomes(design: &McDesign, config: &McConfig, estimators: &[McEstimator], pool: &rayon::ThreadPool) -> Vec<ReplicationOutcome> {
    pool.install(|| {
        (0..design.replications as u64)
            .into_par_iter()
            .map(|rep| run_replication(design, rep, config, estimators))
            .collect()
    })
}

pub fn run_design(design: &McDesign, config: &McConfig, estimators: &[McEstimator], pool: &rayon::ThreadPool) -> McSummary {
    let outcomes = run_design_outcomes(design, config, estimators, pool);
    summarize(design, &outcomes, estimators)
}

fn fmt_stat(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".to_string()
    }
}

/// Table with one row per design: `n, lambda, delta`, then bias and MAE for
/// OLS, IV and GMM, then the failure counts.
pub fn table_csv(rows: &[McSummary]) -> String {
    let mut out = String::from("n,lambda,delta,ols_bias,ols_mae,iv_bias,iv_mae,gmm_bias,gmm_mae,ols_fail,iv_fail,gmm_fail\n");
    for s in rows {
        let mut fields = vec![s.n.to_string(), format!("{}", s.lambda0), format!("{}", s.delta)];
        let mut fails = Vec::new();
        for est in McEstimator::ALL {
            match s.get(est) {
                Some(e) => {
                    fields.push(fmt_stat(e.median_bias));
                    fields.push(fmt_stat(e.mae));
                    fails.push(e.n_fail.to_string());
                }
                None => {
                    fields.push("NA".into());
                    fields.push("NA".into());
                    fails.push("NA".into());
                }
            }
        }
        fields.extend(fails);
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// The reference grid: `lambda in {.1, .5, .7}` by `delta in {.5, .3, .1}`.
pub fn table_grid(n: usize, replications: usize, seed: u64) -> Vec<McDesign> {
    design_grid(n, &[0.1, 0.5, 0.7], &[0.5, 0.3, 0.1], replications, seed)
}

/// Cells `lambdas x deltas` in row-major order, each with its own seed.
pub fn design_grid(n: usize, lambdas: &[f64], deltas: &[f64], replications: usize, seed: u64) -> Vec<McDesign> {
    let mut out = Vec::new();
    for (li, &l) in lambdas.iter().enumerate() {
        for (di, &d) in deltas.iter().enumerate() {
            // distinct seeds per cell keep cells independent
            let cell_seed = seed.wrapping_add((li * deltas.len() + di) as u64 * 1_000_003);
            out.push(McDesign::new(n, l, d, replications, cell_seed));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub alpha: f64,
    pub rejection_rate: f64,
    pub n_success: usize,
    pub n_fail: usize,
    /// Wald statistics of the successful replications, in replication order.
    pub statistics: Vec<f64>,
}

/// Rejects when `T > chi2_{1, 1 - alpha}`; `alpha = 0` never rejects and `alpha = 1` always does.
pub fn rejection_rate(statistics: &[f64], alpha: f64, dof: usize) -> f64 {
    if statistics.is_empty() {
        return f64::NAN;
    }
    let rejected = if alpha <= 0.0 {
        0
    } else if alpha >= 1.0 {
        statistics.len()
    } else {
        let crit = ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(1.0 - alpha);
        statistics.iter().filter(|&&t| t > crit).count()
    };
    rejected as f64 / statistics.len() as f64
}

/// Wald statistics for `H0: lambda = lambda_0` over the replications of `design`.
pub fn wald_statistics(design: &McDesign, config: &McConfig, pool: &rayon::ThreadPool) -> Vec<Option<f64>> {
    pool.install(|| {
        (0..design.replications as u64)
            .into_par_iter()
            .map(|rep| {
                let prep = prepare(design, rep, config).ok()?;
                let res = estimate_gmm(&prep, config).ok()?;
                if !res.converged {
                    return None;
                }
                let mut r = DMatrix::zeros(1, res.theta.len());
                r[(0, 0)] = 1.0;
                wald_test(&res, &r, &[design.lambda0]).ok().map(|w| w.statistic)
            })
            .collect()
    })
}

pub fn coverage_experiment(design: &McDesign, alpha: f64, config: &McConfig, pool: &rayon::ThreadPool) -> CoverageResult {
    let stats = wald_statistics(design, config, pool);
    let ok: Vec<f64> = stats.iter().flatten().copied().collect();
    CoverageResult {
        alpha,
        rejection_rate: rejection_rate(&ok, alpha, 1),
        n_success: ok.len(),
        n_fail: stats.len() - ok.len(),
        statistics: ok,
    }
}

/// Start vector for the example model.
pub fn example_theta(lambda: f64, beta: [f64; 2]) -> DVector<f64> {
    DVector::from_vec(vec![lambda, beta[0], beta[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_arithmetic() {
        let est = [0.9, 1.0, 1.2];
        assert!(median_bias(&est, 1.0).abs() < 1e-15);
        assert!((mae(&est, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0, 4.0]), 2.5);
    }

    #[test]
    fn rejection_rate_boundaries() {
        let t = [0.0, 0.5, 4.0, 10.0];
        assert_eq!(rejection_rate(&t, 0.0, 1), 0.0);
        assert_eq!(rejection_rate(&t, 1.0, 1), 1.0);
        assert_eq!(rejection_rate(&t, 0.05, 1), 0.5);
    }
}
