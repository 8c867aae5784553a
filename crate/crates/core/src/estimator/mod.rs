//! GMM estimation from stacked linear-quadratic moments, with multi-start
//! optimization, sandwich variances and Wald tests.

pub mod linear;
pub mod optimizer;
pub mod start;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{condition_number, singular_values, solve_spd, sym_inverse, symmetrize};
use crate::moments::{moments_and_jacobian, weight_matrix, ModelData, MomentSet};
use crate::panel::ParamVector;

pub use linear::{ols_estimate, partial_out_beta, tsls_estimate, BetaProfile};
pub use optimizer::{minimize, OptimOptions, OptimResult};
pub use start::{fit_quadratic, quadratic_roots, starting_values, StartCandidate};

/// Largest condition number accepted for `G' Xi G`.
pub const MAX_JACOBIAN_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub lambda_bounds: [f64; 2],
    pub rho_bounds: [f64; 2],
    /// Bounds on free factor entries; unbounded when absent.
    pub factor_bounds: Option<[f64; 2]>,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub allow_pseudo_inverse: bool,
    /// Add profile-root starting values (one spatial lag and quadratic moments required).
    pub profile_starts: bool,
    /// Keep only the best `k` profile roots (by quadratic criterion); all when absent.
    pub max_profile_starts: Option<usize>,
    /// Add the 2SLS point as a start.
    pub tsls_start: bool,
    /// Relative objective difference below which two local optima count as tied.
    pub tie_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lambda_bounds: [-0.99, 0.99],
            rho_bounds: [-0.99, 0.99],
            factor_bounds: None,
            max_iterations: 500,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            allow_pseudo_inverse: true,
            profile_starts: true,
            max_profile_starts: None,
            tsls_start: true,
            tie_tol: 1e-10,
        }
    }
}

impl EstimatorConfig {
    fn options(&self) -> OptimOptions {
        OptimOptions {
            max_iterations: self.max_iterations,
            grad_tol: self.grad_tol,
            step_tol: self.step_tol,
        }
    }

    fn bounds(&self, data: &ModelData) -> optimizer::Bounds {
        let spec = data.spec();
        let inf = f64::INFINITY;
        let mut b = Vec::new();
        b.extend(std::iter::repeat_n((self.lambda_bounds[0], self.lambda_bounds[1]), spec.design.spatial_lags));
        b.extend(std::iter::repeat_n((-inf, inf), spec.design.regressors.len()));
        b.extend(std::iter::repeat_n((self.rho_bounds[0], self.rho_bounds[1]), spec.error_lags));
        if spec.estimate_factor {
            let fb = self.factor_bounds.map_or((-inf, inf), |f| (f[0], f[1]));
            b.extend(std::iter::repeat_n(fb, data.periods() - 1));
        }
        b
    }
}

/// Weighting `Xi` for the criterion and moment variance `V` for the sandwich.
#[derive(Debug, Clone)]
pub struct GmmWeights {
    pub xi: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl GmmWeights {
    /// `Xi = V~^{-1}` with `V~` from the moment set.
    pub fn optimal(ms: &MomentSet, allow_pseudo: bool) -> Result<Self> {
        let w = weight_matrix(ms, allow_pseudo)?;
        Ok(Self { xi: w.xi, v: w.v })
    }

    /// `Xi = I`, with `V~` kept for the sandwich.
    pub fn identity(ms: &MomentSet, allow_pseudo: bool) -> Result<Self> {
        let w = weight_matrix(ms, allow_pseudo)?;
        Ok(Self {
            xi: DMatrix::identity(ms.len(), ms.len()),
            v: w.v,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmResult {
    pub theta_hat: ParamVector,
    pub theta: Vec<f64>,
    pub names: Vec<String>,
    /// `n^{-1} mbar' Xi mbar` at the optimum.
    pub objective: f64,
    pub moments: Vec<f64>,
    /// `G_n = d(n^{-1/2} mbar)/d theta` at the optimum.
    pub g_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    /// Sandwich variance of `sqrt(n)(theta_hat - theta_0)`; absent when `G` is rank deficient.
    pub psi_hat: Option<DMatrix<f64>>,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub starts: usize,
    pub best_start: usize,
    pub n: usize,
}

impl GmmResult {
    /// Standard errors `sqrt(diag(Psi) / n)`.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.psi_hat
            .as_ref()
            .map(|p| (0..p.nrows()).map(|i| (p[(i, i)].max(0.0) / self.n as f64).sqrt()).collect())
    }
}

/// Criterion value and gradient at free parameters `theta`.
pub fn objective_and_gradient(
    theta: &[f64],
    template: &ParamVector,
    data: &ModelData,
    ms: &MomentSet,
    xi: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>)> {
    let p = data.spec().apply_theta(template, theta);
    let (m, jac) = moments_and_jacobian(&p, data, ms)?;
    let n = data.n() as f64;
    let xm = xi * &m.m;
    let value = m.m.dot(&xm) / n;
    let grad = jac.tr_mul(&xm) * (2.0 / n);
    Ok((value, grad))
}

/// Sandwich `(G'Xi G)^{-1} G'Xi V Xi G (G'Xi G)^{-1}`, symmetrized.
pub fn sandwich_psi(g: &DMatrix<f64>, xi: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("weight rows", g.nrows(), xi.nrows())?;
    check_dim("variance rows", g.nrows(), v.nrows())?;
    let b = g.tr_mul(&(xi * g));
    let cond = condition_number(&b);
    if g.nrows() < g.ncols() || !cond.is_finite() || cond > MAX_JACOBIAN_CONDITION {
        return Err(Error::RankDeficientJacobian { condition: cond });
    }
    let b_inv = solve_spd(&b, &DMatrix::identity(b.nrows(), b.ncols()), f64::INFINITY)
        .map_err(|_| Error::RankDeficientJacobian { condition: cond })?;
    let xg = xi * g;
    let meat = xg.tr_mul(&(v * &xg));
    Ok(symmetrize(&(&b_inv * meat * &b_inv)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Wald test of `R theta = r` using `T = n (R theta - r)' (R Psi R')^{-1} (R theta - r)`.
pub fn wald_from_parts(theta: &[f64], psi: &DMatrix<f64>, n: usize, r_mat: &DMatrix<f64>, r: &[f64]) -> Result<WaldOutcome> {
    check_dim("restriction columns", theta.len(), r_mat.ncols())?;
    check_dim("restriction rows", r_mat.nrows(), r.len())?;
    let q = r_mat.nrows();
    if q == 0 || q > r_mat.ncols() {
        return Err(Error::RankDeficientRestriction);
    }
    let sv = singular_values(r_mat);
    if sv[q - 1] <= 1e-12 * sv[0] {
        return Err(Error::RankDeficientRestriction);
    }
    let diff = r_mat * DVector::from_column_slice(theta) - DVector::from_column_slice(r);
    let mid = r_mat * psi * r_mat.transpose();
    let inv = sym_inverse(&mid, 1e-12, false).map_err(|_| Error::RankDeficientRestriction)?;
    let statistic = (n as f64 * diff.dot(&(&inv.inverse * &diff))).max(0.0);
    let chi = ChiSquared::new(q as f64).expect("positive degrees of freedom");
    Ok(WaldOutcome {
        statistic,
        dof: q,
        p_value: chi.sf(statistic).clamp(0.0, 1.0),
    })
}

pub fn wald_test(result: &GmmResult, r_mat: &DMatrix<f64>, r: &[f64]) -> Result<WaldOutcome> {
    let psi = result
        .psi_hat
        .as_ref()
        .ok_or(Error::RankDeficientJacobian { condition: f64::INFINITY })?;
    wald_from_parts(&result.theta, psi, result.n, r_mat, r)
}

/// Default starts: the 2SLS point and the profile roots when available.
pub fn default_starts(
    data: &ModelData,
    ms: &MomentSet,
    template: &ParamVector,
    config: &EstimatorConfig,
) -> Vec<DVector<f64>> {
    let spec = data.spec();
    let base = spec.theta_vec(template);
    let nl = spec.design.spatial_lags;
    let kd = spec.n_delta();
    let mut starts = Vec::new();
    if config.tsls_start {
        match tsls_estimate(data, ms, template) {
            Ok(delta) => {
                let mut s = base.clone();
                s.rows_mut(0, kd).copy_from(&delta);
                for i in 0..nl {
                    s[i] = s[i].clamp(config.lambda_bounds[0], config.lambda_bounds[1]);
                }
                starts.push(s);
            }
            Err(e) => log::debug!("2SLS start unavailable: {e}"),
        }
    }
    if config.profile_starts && nl == 1 && ms.n_quadratic() > 0 {
        match starting_values(data, ms, template, (config.lambda_bounds[0], config.lambda_bounds[1])) {
            Ok(cands) => {
                let keep = config.max_profile_starts.unwrap_or(usize::MAX);
                for c in cands.into_iter().take(keep) {
                    let mut s = base.clone();
                    s[0] = c.lambda;
                    s.rows_mut(1, kd - 1).copy_from(&c.beta);
                    starts.push(s);
                }
            }
            Err(e) => log::debug!("profile starts unavailable: {e}"),
        }
    }
    if starts.is_empty() {
        starts.push(base);
    }
    starts
}

fn gauss_newton_inverse(theta: &DVector<f64>, template: &ParamVector, data: &ModelData, ms: &MomentSet, xi: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = data.spec().apply_theta(template, theta.as_slice());
    let (_, jac) = moments_and_jacobian(&p, data, ms).ok()?;
    let hess = jac.tr_mul(&(xi * &jac)) * (2.0 / data.n() as f64);
    let inv = sym_inverse(&hess, 1e-12, false).ok()?;
    Some(inv.inverse)
}

/// Minimizes `n^{-1} mbar' Xi mbar` from each start (in parallel) and from the
/// default starts, returning the best local optimum. Ties in the objective are
/// broken by the smaller `||theta||_2`, then by the earlier start.
pub fn gmm_estimate(
    data: &ModelData,
    ms: &MomentSet,
    weights: &GmmWeights,
    template: &ParamVector,
    starts: &[DVector<f64>],
    config: &EstimatorConfig,
) -> Result<GmmResult> {
    let dim = data.spec().n_theta(data.periods());
    check_dim("weight matrix size", ms.len(), weights.xi.nrows())?;
    let mut all: Vec<DVector<f64>> = starts.to_vec();
    all.extend(default_starts(data, ms, template, config));
    for s in &all {
        check_dim("start length", dim, s.len())?;
    }
    let bounds = config.bounds(data);
    let opts = config.options();
    let runs: Vec<Option<OptimResult>> = all
        .par_iter()
        .map(|x0| {
            let h0 = gauss_newton_inverse(x0, template, data, ms, &weights.xi);
            let f = |x: &DVector<f64>| objective_and_gradient(x.as_slice(), template, data, ms, &weights.xi);
            match minimize(f, x0, &bounds, h0, &opts) {
                Ok(r) if r.value.is_finite() => Some(r),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("start rejected: {e}");
                    None
                }
            }
        })
        .collect();
    let mut best: Option<(usize, OptimResult)> = None;
    for (idx, run) in runs.into_iter().enumerate() {
        let Some(r) = run else { continue };
        best = match best {
            None => Some((idx, r)),
            Some((bi, b)) => {
                let tol = config.tie_tol * b.value.abs().max(r.value.abs()).max(f64::MIN_POSITIVE);
                let better = if (r.value - b.value).abs() <= tol {
                    r.x.norm() < b.x.norm()
                } else {
                    r.value < b.value
                };
                if better { Some((idx, r)) } else { Some((bi, b)) }
            }
        };
    }
    let (best_start, opt) = best.ok_or(Error::NoStartingValue)?;
    if !opt.converged {
        log::warn!(
            "optimizer stopped after {} iterations with projected gradient {:e}",
            opt.iterations,
            opt.projected_gradient_norm
        );
    }
    let theta_hat = data.spec().apply_theta(template, opt.x.as_slice());
    let (m, jac) = moments_and_jacobian(&theta_hat, data, ms)?;
    let n = data.n();
    let g_hat = jac / (n as f64).sqrt();
    let psi_hat = match sandwich_psi(&g_hat, &weights.xi, &weights.v) {
        Ok(p) => Some(p),
        Err(e) => {
            log::warn!("sandwich variance unavailable: {e}");
            None
        }
    };
    Ok(GmmResult {
        theta_hat,
        theta: opt.x.as_slice().to_vec(),
        names: data.spec().theta_names(data.periods()),
        objective: opt.value,
        moments: m.m.as_slice().to_vec(),
        g_hat,
        v_hat: weights.v.clone(),
        xi: weights.xi.clone(),
        psi_hat,
        converged: opt.converged,
        gradient_norm: opt.projected_gradient_norm,
        iterations: opt.iterations,
        starts: all.len(),
        best_start,
        n,
    })
}

/// First step: `Xi = I` with unit variance components.
pub fn first_step_gmm(data: &ModelData, ms: &MomentSet, template: &ParamVector, config: &EstimatorConfig) -> Result<GmmResult> {
    let mut unit = template.clone();
    unit.gamma_sigma.iter_mut().for_each(|g| *g = 1.0);
    unit.gamma_rho.iter_mut().for_each(|g| *g = 1.0);
    let weights = GmmWeights::identity(ms, config.allow_pseudo_inverse)?;
    gmm_estimate(data, ms, &weights, &unit, &[], config)
}

/// Two-step efficient GMM: a first step with `Xi = I`, then `Xi = V~^{-1}` at
/// the variance components of `gamma_tilde`, started from the first step.
pub fn efficient_gmm(data: &ModelData, ms: &MomentSet, gamma_tilde: &ParamVector, config: &EstimatorConfig) -> Result<(GmmResult, GmmResult)> {
    let step1 = first_step_gmm(data, ms, gamma_tilde, config)?;
    let weights = GmmWeights::optimal(ms, config.allow_pseudo_inverse)?;
    let start = data.spec().theta_vec(&step1.theta_hat);
    let step2 = gmm_estimate(data, ms, &weights, gamma_tilde, &[start], config)?;
    Ok((step1, step2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_sandwich() {
        let g = DMatrix::from_element(1, 1, 2.0);
        let xi = DMatrix::from_element(1, 1, 0.7);
        let v = DMatrix::from_element(1, 1, 3.0);
        let psi = sandwich_psi(&g, &xi, &v).unwrap();
        assert!((psi[(0, 0)] - 3.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn wald_example() {
        let psi = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let out = wald_from_parts(&[0.6], &psi, 100, &r, &[0.5]).unwrap();
        assert!((out.statistic - 1.0).abs() < 1e-12);
        assert!((out.p_value - 0.317_310_507_862_914_1).abs() < 1e-9);
        let null = wald_from_parts(&[0.5], &psi, 100, &r, &[0.5]).unwrap();
        assert_eq!(null.statistic, 0.0);
        assert_eq!(null.p_value, 1.0);
    }

    #[test]
    fn wald_rejects_rank_deficient_restrictions() {
        let psi = DMatrix::identity(2, 2);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            wald_from_parts(&[0.0, 0.0], &psi, 10, &r, &[0.0, 0.0]),
            Err(Error::RankDeficientRestriction)
        ));
    }
}
