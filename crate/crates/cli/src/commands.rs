//! Subcommand implementations.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use spanel::montecarlo::{build_pool, coverage_experiment, design_grid, run_design, table_csv, McWeighting, ThreadPool};
use spanel::netsim::simulate_replication;
use spanel::vclq::{check_config, random_config, trace_zero_cross_period, Innovation};
use spanel::{
    diagnose, efficient_gmm, gmm_estimate, helmert_weights, read_panel, read_weights, row_normalize, wald_test, write_panel,
    write_weights, GmmResult, GmmWeights, IsolatedPolicy, McDesign, McEstimator, ModelData, ModelSpec, MomentSet,
    MomentSpec, PanelData, ParamVector, SpatialWeightMatrix,
};

use crate::config::{EstimateConfig, IdentifyConfig, MonteCarloConfig, SimulateConfig, UsageError, VerifyConfig};
use crate::output::{to_json, write_atomic, Manifest};

#[derive(Debug)]
pub enum Failure {
    Usage(UsageError),
    Compute(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(UsageError::new(msg.to_string()))
}

fn compute(msg: impl std::fmt::Display) -> Failure {
    Failure::Compute(msg.to_string())
}

fn io_out(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| compute(format!("cannot write {}: {e}", path.display()))
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

fn pool(workers: Option<usize>) -> Result<ThreadPool, Failure> {
    build_pool(workers).map_err(|e| usage(format!("cannot build a worker pool: {e}")))
}

pub fn simulate(common: &Common, mut cfg: SimulateConfig) -> Result<(), Failure> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let design = McDesign {
        n: cfg.n,
        periods: cfg.periods,
        lambda0: cfg.lambda0,
        beta1: cfg.beta1,
        delta: cfg.delta,
        seed: cfg.seed,
        replications: cfg.replication as usize + 1,
        zeta_width: cfg.zeta_width,
        network: cfg.network.clone(),
    };
    if cfg.n < 2 || cfg.periods < 2 {
        return Err(usage("simulation needs n >= 2 and periods >= 2"));
    }
    let sim = simulate_replication(&design, cfg.replication).map_err(compute)?;
    let mut panel_csv = Vec::new();
    write_panel(&mut panel_csv, &sim.panel, None, None).map_err(compute)?;
    let mut weights_csv = Vec::new();
    write_weights(&mut weights_csv, &sim.panel, None, None).map_err(compute)?;
    let out = &common.out;
    let mut manifest = Manifest::new("simulate", &cfg, Some(cfg.seed), 1);
    for (name, bytes) in [("panel.csv", &panel_csv), ("weights.csv", &weights_csv)] {
        write_atomic(out, name, bytes).map_err(io_out(out))?;
        manifest.outputs.push(name.into());
    }
    manifest.write(out).map_err(io_out(out))?;
    println!(
        "simulated n={} T={} with {} links ({} isolated units repaired)",
        cfg.n,
        cfg.periods,
        sim.adjacency.nnz(),
        sim.repair.attached
    );
    Ok(())
}

fn load_panel(data: &Path, weights: Option<&Path>, normalize: bool) -> Result<PanelData, Failure> {
    let open = |p: &Path| File::open(p).map_err(|e| usage(format!("cannot open {}: {e}", p.display())));
    let table = read_panel(open(data)?).map_err(|e| usage(format!("{}: {e}", data.display())))?;
    let mut set = match weights {
        Some(w) => read_weights(open(w)?, &table).map_err(|e| usage(format!("{}: {e}", w.display())))?,
        None => Default::default(),
    };
    if normalize {
        let norm = |family: &mut Vec<Vec<Arc<SpatialWeightMatrix>>>| -> Result<(), Failure> {
            for mats in family.iter_mut() {
                for m in mats.iter_mut() {
                    *m = Arc::new(row_normalize(m.entries(), IsolatedPolicy::ZeroRow).map_err(usage)?);
                }
            }
            Ok(())
        };
        norm(&mut set.lag)?;
        norm(&mut set.error)?;
    }
    table.into_panel(set.lag, set.error).map_err(usage)
}

struct Prepared {
    data: ModelData,
    moments: MomentSet,
    template: ParamVector,
}

fn prepare(
    panel: &PanelData,
    model: &ModelSpec,
    moments: &MomentSpec,
    factor: Option<&Vec<f64>>,
    sigma2: Option<&Vec<f64>>,
    rho: Option<&Vec<f64>>,
) -> Result<Prepared, Failure> {
    let (n, periods) = (panel.n(), panel.periods());
    let mut template = ParamVector::new(
        vec![0.0; model.design.spatial_lags],
        vec![0.0; model.design.regressors.len()],
        rho.cloned().unwrap_or_else(|| vec![0.0; model.error_lags]),
        periods,
        n,
    );
    if template.rho.len() != model.error_lags {
        return Err(usage(format!("rho has {} entries for {} error lags", template.rho.len(), model.error_lags)));
    }
    for (name, given, slot) in [("factor", factor, &mut template.f), ("sigma2", sigma2, &mut template.gamma_sigma)] {
        if let Some(v) = given {
            if v.len() != periods {
                return Err(usage(format!("{name} has {} entries for {periods} periods", v.len())));
            }
            *slot = v.clone();
        }
    }
    template.validate().map_err(usage)?;
    let data = ModelData::new(panel, model).map_err(usage)?;
    let transform = helmert_weights(&template.f, &template.gamma_sigma).map_err(compute)?;
    let required = if moments.quadratic.is_empty() {
        model.n_delta()
    } else {
        model.design.regressors.len()
    };
    let moments = MomentSet::build(panel, moments, &transform, required).map_err(compute)?;
    Ok(Prepared {
        data,
        moments,
        template,
    })
}

#[derive(Debug, Serialize)]
struct StepSummary {
    theta: Vec<f64>,
    objective: f64,
    converged: bool,
}

#[derive(Debug, Serialize)]
struct WaldRow {
    name: String,
    statistic: Option<f64>,
    dof: usize,
    p_value: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct EstimateOutput {
    n: usize,
    periods: usize,
    n_moments: usize,
    weighting: McWeighting,
    names: Vec<String>,
    theta: Vec<f64>,
    standard_errors: Option<Vec<f64>>,
    /// Sandwich variance of `sqrt(n)(theta_hat - theta_0)`, row-major.
    psi: Option<Vec<Vec<f64>>>,
    objective: f64,
    converged: bool,
    gradient_norm: f64,
    iterations: usize,
    starts: usize,
    first_step: Option<StepSummary>,
    wald: Vec<WaldRow>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn wald_rows(result: &GmmResult, cfg: &EstimateConfig) -> Result<Vec<WaldRow>, Failure> {
    let dim = result.theta.len();
    let blocks: Vec<(String, DMatrix<f64>, Vec<f64>)> = if cfg.wald.is_empty() {
        (0..dim)
            .map(|k| {
                let mut r = DMatrix::zeros(1, dim);
                r[(0, k)] = 1.0;
                (format!("{} = 0", result.names[k]), r, vec![0.0])
            })
            .collect()
    } else {
        cfg.wald
            .iter()
            .map(|w| {
                if w.r.is_empty() || w.r.iter().any(|row| row.len() != dim) {
                    return Err(usage(format!("wald block `{}` needs rows of length {dim}", w.name)));
                }
                let r = DMatrix::from_fn(w.r.len(), dim, |i, j| w.r[i][j]);
                let value = w.value.clone().unwrap_or_else(|| vec![0.0; w.r.len()]);
                Ok((w.name.clone(), r, value))
            })
            .collect::<Result<_, _>>()?
    };
    Ok(blocks
        .into_iter()
        .map(|(name, r, value)| match wald_test(result, &r, &value) {
            Ok(w) => WaldRow {
                name,
                statistic: Some(w.statistic),
                dof: w.dof,
                p_value: Some(w.p_value),
                error: None,
            },
            Err(e) => WaldRow {
                name,
                statistic: None,
                dof: r.nrows(),
                p_value: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

pub fn estimate(common: &Common, data: &Path, weights: Option<&Path>, cfg: EstimateConfig) -> Result<(), Failure> {
    let panel = load_panel(data, weights, cfg.row_normalize)?;
    let prep = prepare(&panel, &cfg.model, &cfg.moments, cfg.factor.as_ref(), cfg.sigma2.as_ref(), None)?;
    let pool = pool(common.workers)?;
    let allow = cfg.estimator.allow_pseudo_inverse;
    let (first, result) = pool
        .install(|| match cfg.weighting {
            McWeighting::Optimal => GmmWeights::optimal(&prep.moments, allow)
                .and_then(|w| gmm_estimate(&prep.data, &prep.moments, &w, &prep.template, &[], &cfg.estimator))
                .map(|r| (None, r)),
            McWeighting::Identity => GmmWeights::identity(&prep.moments, allow)
                .and_then(|w| gmm_estimate(&prep.data, &prep.moments, &w, &prep.template, &[], &cfg.estimator))
                .map(|r| (None, r)),
            McWeighting::TwoStep => {
                efficient_gmm(&prep.data, &prep.moments, &prep.template, &cfg.estimator).map(|(s1, s2)| (Some(s1), s2))
            }
        })
        .map_err(compute)?;
    if !result.converged {
        log::warn!("optimizer stopped before convergence (gradient {:e})", result.gradient_norm);
    }
    let out = EstimateOutput {
        n: panel.n(),
        periods: panel.periods(),
        n_moments: prep.moments.len(),
        weighting: cfg.weighting,
        names: result.names.clone(),
        theta: result.theta.clone(),
        standard_errors: result.standard_errors(),
        psi: result.psi_hat.as_ref().map(rows),
        objective: result.objective,
        converged: result.converged,
        gradient_norm: result.gradient_norm,
        iterations: result.iterations,
        starts: result.starts,
        first_step: first.map(|s| StepSummary {
            theta: s.theta,
            objective: s.objective,
            converged: s.converged,
        }),
        wald: wald_rows(&result, &cfg)?,
    };
    let dir = &common.out;
    write_atomic(dir, "estimate.json", &to_json(&out)).map_err(io_out(dir))?;
    let mut manifest = Manifest::new("estimate", &cfg, None, pool.current_num_threads());
    manifest.inputs = inputs(data, weights);
    manifest.outputs.push("estimate.json".into());
    manifest.write(dir).map_err(io_out(dir))?;
    let se = out.standard_errors.clone().unwrap_or_default();
    for (k, name) in out.names.iter().enumerate() {
        match se.get(k) {
            Some(s) => println!("{name:>12} {:>12.6} ({s:.6})", out.theta[k]),
            None => println!("{name:>12} {:>12.6}", out.theta[k]),
        }
    }
    Ok(())
}

fn inputs(data: &Path, weights: Option<&Path>) -> Vec<String> {
    std::iter::once(data).chain(weights).map(|p| p.display().to_string()).collect()
}

pub fn identify(common: &Common, data: &Path, weights: Option<&Path>, cfg: IdentifyConfig) -> Result<(), Failure> {
    let panel = load_panel(data, weights, cfg.row_normalize)?;
    let prep = prepare(
        &panel,
        &cfg.model,
        &cfg.moments,
        cfg.factor.as_ref(),
        cfg.sigma2.as_ref(),
        cfg.rho.as_ref(),
    )?;
    let report = diagnose(&prep.data, &prep.moments, &prep.template, &cfg.thresholds).map_err(compute)?;
    let dir = &common.out;
    write_atomic(dir, "identification.json", &to_json(&report)).map_err(io_out(dir))?;
    let mut manifest = Manifest::new("identify", &cfg, None, 1);
    manifest.inputs = inputs(data, weights);
    manifest.outputs.push("identification.json".into());
    manifest.write(dir).map_err(io_out(dir))?;
    for p in &report.periods {
        println!(
            "period {}: sigma_min(H'W/n) {:.3e}, sigma_min(H'Z/n) {:.3e}, sigma_min(S_n) {:.3e}, {:?}",
            p.period + 1,
            p.sigma_min_hw,
            p.sigma_min_hz,
            p.sigma_min_s,
            p.verdict
        );
    }
    println!("verdict: {:?}", report.verdict);
    Ok(())
}

pub fn montecarlo(common: &Common, replications: Option<usize>, mut cfg: MonteCarloConfig) -> Result<(), Failure> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = replications {
        cfg.replications = r;
    }
    if cfg.replications == 0 || cfg.lambdas.is_empty() || cfg.deltas.is_empty() {
        return Err(usage("the grid needs at least one lambda, one delta and one replication"));
    }
    let pool = pool(common.workers)?;
    let designs = design_grid(cfg.n, &cfg.lambdas, &cfg.deltas, cfg.replications, cfg.seed);
    let summaries: Vec<_> = designs
        .iter()
        .map(|d| {
            log::info!("cell lambda={} delta={}", d.lambda0, d.delta);
            run_design(d, &cfg.settings, &McEstimator::ALL, &pool)
        })
        .collect();
    let table = table_csv(&summaries);
    let dir = &common.out;
    write_atomic(dir, "table.csv", table.as_bytes()).map_err(io_out(dir))?;
    let mut outputs = vec!["table.csv".to_string()];
    if let Some(cov) = &cfg.coverage {
        let design = McDesign::new(cfg.n, cov.lambda0, cov.delta, cfg.replications, cfg.seed);
        let result = coverage_experiment(&design, cov.alpha, &cfg.settings, &pool);
        write_atomic(dir, "coverage.json", &to_json(&result)).map_err(io_out(dir))?;
        outputs.push("coverage.json".into());
        println!(
            "coverage: rejection rate {:.4} at alpha {} ({} successful, {} failed)",
            result.rejection_rate, result.alpha, result.n_success, result.n_fail
        );
    }
    let mut manifest = Manifest::new("montecarlo", &cfg, Some(cfg.seed), pool.current_num_threads());
    manifest.outputs = outputs;
    manifest.write(dir).map_err(io_out(dir))?;
    print!("{table}");
    Ok(())
}

pub fn verify_vclq(common: &Common, mut cfg: VerifyConfig) -> Result<(), Failure> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.n < 2 || cfg.draws < 2 {
        return Err(usage("verification needs n >= 2 and draws >= 2"));
    }
    let pool = pool(common.workers)?;
    let mut csv = String::from("config,innovation,periods,statistic,predicted,empirical,se,z,pass\n");
    let mut failed = 0usize;
    let mut rng = spanel::rng::stream(cfg.seed, 0, 0);
    println!("{:>6} {:>18} {:>3}  {:>17} {:>8}  result", "config", "innovation", "T", "statistic", "z");
    for c in 0..cfg.configs {
        let innovation = if c % 2 == 0 { Innovation::Normal } else { Innovation::CenteredChiSquare };
        let vc = random_config(cfg.n, innovation, &mut rng).map_err(compute)?;
        let checks = pool
            .install(|| check_config(&vc, cfg.draws, cfg.seed.wrapping_add(100 + c as u64)))
            .map_err(compute)?;
        for (name, ch) in checks.all() {
            let pass = ch.within(cfg.tolerance_se) && checks.complete;
            failed += usize::from(!pass);
            csv += &format!(
                "{c},{innovation:?},{},{name},{},{},{},{},{pass}\n",
                vc.pi.ncols(),
                ch.predicted,
                ch.empirical,
                ch.se,
                ch.z
            );
            println!(
                "{c:>6} {:>18} {:>3}  {name:>17} {:>8.2}  {}",
                format!("{innovation:?}"),
                vc.pi.ncols(),
                ch.z,
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    if cfg.trace_zero {
        let n = cfg.n + cfg.n % 2;
        let (demo, pred) = pool
            .install(|| trace_zero_cross_period(n, cfg.draws, cfg.seed.wrapping_add(3)))
            .map_err(compute)?;
        // the K-free prediction is expected to miss here
        let pass = demo.z > cfg.tolerance_se && !pred.complete;
        failed += usize::from(!pass);
        csv += &format!(
            "trace_zero,CenteredChiSquare,3,cross_t,{},{},{},{},{pass}\n",
            demo.predicted, demo.empirical, demo.se, demo.z
        );
        println!(
            "{:>6} {:>18} {:>3}  {:>17} {:>8.2}  {}",
            "zero",
            "CenteredChiSquare",
            3,
            "cross_t",
            demo.z,
            if pass { "PASS (deviation detected)" } else { "FAIL" }
        );
    }
    let dir = &common.out;
    write_atomic(dir, "vclq.csv", csv.as_bytes()).map_err(io_out(dir))?;
    let mut manifest = Manifest::new("verify-vclq", &cfg, Some(cfg.seed), pool.current_num_threads());
    manifest.outputs.push("vclq.csv".into());
    manifest.write(dir).map_err(io_out(dir))?;
    if failed > 0 {
        return Err(compute(format!("{failed} covariance check(s) failed")));
    }
    println!("all covariance checks passed");
    Ok(())
}
