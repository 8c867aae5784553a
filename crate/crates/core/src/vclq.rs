//! Means and covariances of linear-quadratic forms in forward-differenced
//! disturbances: closed-form predictions and a brute-force simulation oracle.
//!
//! A form is `q = x' A w + a' x` with `x = sum_s pi_s u_s` and `w = sum_s gamma_s u_s`,
//! where `u_is = sigma_s varrho_i eps_is` and the `eps` are i.i.d. with unit variance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{stage, stream};

/// Draws per parallel chunk; each chunk has its own random stream.
pub const CHUNK_DRAWS: usize = 4096;

/// Tolerance for the zero-diagonal and orthonormality checks.
pub const CONDITION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LqForm {
    pub a: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub pi_row: DVector<f64>,
    pub gamma_row: DVector<f64>,
}

impl LqForm {
    /// Orthogonally transformed form (`gamma = pi`).
    pub fn orthogonal(a: DMatrix<f64>, lin: DVector<f64>, pi_row: DVector<f64>) -> Self {
        Self {
            a,
            lin,
            gamma_row: pi_row.clone(),
            pi_row,
        }
    }

    fn n(&self) -> usize {
        self.lin.len()
    }

    fn periods(&self) -> usize {
        self.pi_row.len()
    }

    fn validate(&self) -> Result<()> {
        check_dim("quadratic weight rows", self.n(), self.a.nrows())?;
        check_dim("quadratic weight columns", self.n(), self.a.ncols())?;
        check_dim("gamma row length", self.periods(), self.gamma_row.len())?;
        if self.a.iter().chain(self.lin.iter()).chain(self.pi_row.iter()).chain(self.gamma_row.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear-quadratic form"));
        }
        Ok(())
    }

    fn value(&self, x: &DVector<f64>, w: &DVector<f64>) -> f64 {
        x.dot(&(&self.a * w)) + self.lin.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Innovation {
    #[default]
    Normal,
    /// `(chi2_1 - 1) / sqrt(2)`: skewed, excess kurtosis 12.
    CenteredChiSquare,
}

impl Innovation {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match self {
            Innovation::Normal => z,
            Innovation::CenteredChiSquare => (z * z - 1.0) / std::f64::consts::SQRT_2,
        }
    }
}

/// Variance components `sigma_t^2` (time) and `varrho_i^2` (units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VclqDgp {
    pub sigma2: Vec<f64>,
    pub varrho2: Vec<f64>,
    pub innovation: Innovation,
}

impl VclqDgp {
    fn validate(&self, n: usize, periods: usize) -> Result<()> {
        check_dim("sigma2 length", periods, self.sigma2.len())?;
        check_dim("varrho2 length", n, self.varrho2.len())?;
        if self.sigma2.iter().chain(&self.varrho2).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("variance components must be positive".into()));
        }
        Ok(())
    }

    /// `p' Sigma_sigma q`.
    fn time_inner(&self, p: &DVector<f64>, q: &DVector<f64>) -> f64 {
        p.iter().zip(q.iter()).zip(&self.sigma2).map(|((a, b), s)| a * b * s).sum()
    }
}

/// `tr(A S B' S)` and `tr(A S B S)` for diagonal `S`.
fn weighted_traces(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &[f64]) -> (f64, f64) {
    let n = a.nrows();
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = s[i] * s[j];
            t1 += a[(i, j)] * b[(i, j)] * w;
            t2 += a[(i, j)] * b[(j, i)] * w;
        }
    }
    (t1, t2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean1: f64,
    pub mean2: f64,
    /// Covariance without the higher-cumulant terms.
    pub cov: f64,
    /// True when both forms meet the zero-diagonal / orthonormal-transform
    /// conditions, under which the omitted terms vanish and `cov` is exact.
    pub complete: bool,
}

/// Whether `form` has a zero-diagonal weight and `gamma = pi` with `pi' Sigma pi = 1`.
pub fn meets_sufficient_conditions(form: &LqForm, dgp: &VclqDgp) -> bool {
    let scale = form.a.amax().max(1.0);
    let zero_diag = form.a.diagonal().amax() <= CONDITION_TOL * scale;
    let same = (&form.pi_row - &form.gamma_row).amax() <= CONDITION_TOL;
    let unit = (dgp.time_inner(&form.pi_row, &form.pi_row) - 1.0).abs() <= CONDITION_TOL;
    zero_diag && same && unit
}

/// Predicted means and covariance of two forms. Forms in different periods
/// count as complete only if their rows are also orthogonal in the
/// `Sigma_sigma` metric.
pub fn predicted_moments(f1: &LqForm, f2: &LqForm, dgp: &VclqDgp) -> Result<Prediction> {
    f1.validate()?;
    f2.validate()?;
    check_dim("form sizes", f1.n(), f2.n())?;
    check_dim("form periods", f1.periods(), f2.periods())?;
    dgp.validate(f1.n(), f1.periods())?;
    let s = &dgp.varrho2;
    let trace_s = |a: &DMatrix<f64>| (0..a.nrows()).map(|i| a[(i, i)] * s[i]).sum::<f64>();
    let mean1 = dgp.time_inner(&f1.pi_row, &f1.gamma_row) * trace_s(&f1.a);
    let mean2 = dgp.time_inner(&f2.pi_row, &f2.gamma_row) * trace_s(&f2.a);
    let pp = dgp.time_inner(&f1.pi_row, &f2.pi_row);
    let gg = dgp.time_inner(&f1.gamma_row, &f2.gamma_row);
    let pg = dgp.time_inner(&f1.pi_row, &f2.gamma_row);
    let gp = dgp.time_inner(&f1.gamma_row, &f2.pi_row);
    let (t1, t2) = weighted_traces(&f1.a, &f2.a, s);
    let lin: f64 = f1.lin.iter().zip(f2.lin.iter()).zip(s).map(|((a, b), v)| a * b * v).sum();
    let cov = pp * gg * t1 + pg * gp * t2 + pp * lin;
    let same_period = (&f1.pi_row - &f2.pi_row).amax() <= CONDITION_TOL;
    let orthogonal_rows = same_period || pp.abs() <= CONDITION_TOL;
    let complete = meets_sufficient_conditions(f1, dgp) && meets_sufficient_conditions(f2, dgp) && orthogonal_rows;
    Ok(Prediction {
        mean1,
        mean2,
        cov,
        complete,
    })
}

/// Values of every form on `draws` common draws of the disturbances. Chunk `c`
/// uses stream `(seed, c)`, so the output does not depend on the thread count.
pub fn simulate_forms(forms: &[LqForm], dgp: &VclqDgp, draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let first = forms.first().ok_or_else(|| Error::InvalidInput("no forms to simulate".into()))?;
    let (n, periods) = (first.n(), first.periods());
    for f in forms {
        f.validate()?;
        check_dim("form sizes", n, f.n())?;
        check_dim("form periods", periods, f.periods())?;
    }
    dgp.validate(n, periods)?;
    let sd_t: Vec<f64> = dgp.sigma2.iter().map(|v| v.sqrt()).collect();
    let sd_i: Vec<f64> = dgp.varrho2.iter().map(|v| v.sqrt()).collect();
    let chunks = draws.div_ceil(CHUNK_DRAWS);
    let per_chunk: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c as u64, stage::ORACLE);
            let len = CHUNK_DRAWS.min(draws - c * CHUNK_DRAWS);
            let mut out = vec![Vec::with_capacity(len); forms.len()];
            let mut u = DMatrix::zeros(n, periods);
            for _ in 0..len {
                for t in 0..periods {
                    for i in 0..n {
                        u[(i, t)] = sd_t[t] * sd_i[i] * dgp.innovation.draw(&mut rng);
                    }
                }
                for (k, f) in forms.iter().enumerate() {
                    let x = &u * &f.pi_row;
                    let w = &u * &f.gamma_row;
                    out[k].push(f.value(&x, &w));
                }
            }
            out
        })
        .collect();
    let mut values = vec![Vec::with_capacity(draws); forms.len()];
    for chunk in per_chunk {
        for (k, v) in chunk.into_iter().enumerate() {
            values[k].extend(v);
        }
    }
    Ok(values)
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Empirical {
    pub mean1: f64,
    pub se_mean1: f64,
    pub mean2: f64,
    pub se_mean2: f64,
    pub cov: f64,
    pub se_cov: f64,
    pub draws: usize,
}

/// Sample means and covariance of two equally long series with their Monte Carlo standard errors.
pub fn empirical_moments(q1: &[f64], q2: &[f64]) -> Result<Empirical> {
    check_dim("series lengths", q1.len(), q2.len())?;
    let k = q1.len();
    if k < 2 {
        return Err(Error::InvalidInput("need at least two draws".into()));
    }
    let kf = k as f64;
    let m1 = pairwise_sum(q1) / kf;
    let m2 = pairwise_sum(q2) / kf;
    let d1: Vec<f64> = q1.iter().map(|v| v - m1).collect();
    let d2: Vec<f64> = q2.iter().map(|v| v - m2).collect();
    let sq = |d: &[f64]| pairwise_sum(&d.iter().map(|v| v * v).collect::<Vec<_>>()) / (kf - 1.0);
    let prod: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a * b).collect();
    let cov = pairwise_sum(&prod) / (kf - 1.0);
    let var_prod = pairwise_sum(&prod.iter().map(|p| (p - cov).powi(2)).collect::<Vec<_>>()) / (kf - 1.0);
    Ok(Empirical {
        mean1: m1,
        se_mean1: (sq(&d1) / kf).sqrt(),
        mean2: m2,
        se_mean2: (sq(&d2) / kf).sqrt(),
        cov,
        se_cov: (var_prod / kf).sqrt(),
        draws: k,
    })
}

/// Convenience wrapper: simulate two forms and summarize.
pub fn simulate_moments(f1: &LqForm, f2: &LqForm, dgp: &VclqDgp, draws: usize, seed: u64) -> Result<Empirical> {
    let v = simulate_forms(&[f1.clone(), f2.clone()], dgp, draws, seed)?;
    empirical_moments(&v[0], &v[1])
}

/// Number of standard errors separating `value` from `target`; zero when both the gap and the SE vanish.
pub fn z_score(value: f64, target: f64, se: f64) -> f64 {
    let gap = (value - target).abs();
    if gap == 0.0 {
        0.0
    } else if se > 0.0 {
        gap / se
    } else {
        f64::INFINITY
    }
}

/// One randomized configuration of the verification suite.
#[derive(Debug, Clone)]
pub struct VclqConfig {
    pub dgp: VclqDgp,
    /// Rows `t < s` of an orthonormal forward-difference transform.
    pub t: usize,
    pub s: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lin_a: DVector<f64>,
    pub lin_b: DVector<f64>,
    pub pi: DMatrix<f64>,
}

/// Random zero-diagonal weights, loadings and variance components for `n`
/// units and 3 to 6 periods, with `Pi` the single-factor transform for a random factor.
pub fn random_config<R: Rng + ?Sized>(n: usize, innovation: Innovation, rng: &mut R) -> Result<VclqConfig> {
    let periods = rng.random_range(3..=6);
    let sigma2: Vec<f64> = (0..periods).map(|_| rng.random_range(0.5..2.0)).collect();
    let varrho2: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let f: Vec<f64> = (0..periods).map(|_| rng.random_range(0.5..1.5)).collect();
    let pi = crate::transform::helmert_weights(&f, &sigma2)?.pi().clone();
    let mut zero_diag = |scale: f64| {
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { scale * (rng.random::<f64>() - 0.5) })
    };
    let a = zero_diag(0.5);
    let b = zero_diag(0.5);
    let lin_a = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let lin_b = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let t = rng.random_range(0..periods - 2);
    let s = rng.random_range(t + 1..periods - 1);
    Ok(VclqConfig {
        dgp: VclqDgp {
            sigma2,
            varrho2,
            innovation,
        },
        t,
        s,
        a,
        b,
        lin_a,
        lin_b,
        pi,
    })
}

/// Empirical-vs-predicted comparison of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub predicted: f64,
    pub empirical: f64,
    pub se: f64,
    pub z: f64,
}

impl Check {
    fn new(predicted: f64, empirical: f64, se: f64) -> Self {
        Self {
            predicted,
            empirical,
            se,
            z: z_score(empirical, predicted, se),
        }
    }

    pub fn within(&self, k: f64) -> bool {
        self.z <= k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigChecks {
    pub mean: Check,
    pub same_t: Check,
    pub cross_t: Check,
    pub linear_quadratic: Check,
    pub complete: bool,
}

impl ConfigChecks {
    pub fn all(&self) -> [(&'static str, Check); 4] {
        [
            ("mean", self.mean),
            ("same_t", self.same_t),
            ("cross_t", self.cross_t),
            ("linear_quadratic", self.linear_quadratic),
        ]
    }
}

/// Mean of `q_A,t`, same-period covariance of `q_A,t` and `q_B,t`, covariance
/// of `q_A,t` with `q_B,s`, and covariance of the linear part of period `t`
/// with the purely quadratic `B` form of period `t`.
pub fn check_config(cfg: &VclqConfig, draws: usize, seed: u64) -> Result<ConfigChecks> {
    let n = cfg.a.nrows();
    let row = |k: usize| cfg.pi.row(k).transpose();
    let qa_t = LqForm::orthogonal(cfg.a.clone(), cfg.lin_a.clone(), row(cfg.t));
    let qb_t = LqForm::orthogonal(cfg.b.clone(), cfg.lin_b.clone(), row(cfg.t));
    let qb_s = LqForm::orthogonal(cfg.b.clone(), cfg.lin_b.clone(), row(cfg.s));
    let lin_t = LqForm::orthogonal(DMatrix::zeros(n, n), cfg.lin_a.clone(), row(cfg.t));
    let quad_t = LqForm::orthogonal(cfg.b.clone(), DVector::zeros(n), row(cfg.t));
    let forms = [qa_t.clone(), qb_t.clone(), qb_s.clone(), lin_t.clone(), quad_t.clone()];
    let v = simulate_forms(&forms, &cfg.dgp, draws, seed)?;
    let p_same = predicted_moments(&qa_t, &qb_t, &cfg.dgp)?;
    let p_cross = predicted_moments(&qa_t, &qb_s, &cfg.dgp)?;
    let p_lq = predicted_moments(&lin_t, &quad_t, &cfg.dgp)?;
    let e_same = empirical_moments(&v[0], &v[1])?;
    let e_cross = empirical_moments(&v[0], &v[2])?;
    let e_lq = empirical_moments(&v[3], &v[4])?;
    Ok(ConfigChecks {
        mean: Check::new(p_same.mean1, e_same.mean1, e_same.se_mean1),
        same_t: Check::new(p_same.cov, e_same.cov, e_same.se_cov),
        cross_t: Check::new(p_cross.cov, e_cross.cov, e_cross.se_cov),
        linear_quadratic: Check::new(p_lq.cov, e_lq.cov, e_lq.se_cov),
        complete: p_same.complete && p_cross.complete && p_lq.complete,
    })
}

/// A weight with zero trace but a non-zero diagonal, `A = diag(1, -1, 1, -1, ...)`
/// (`n` even), used with skewed, heavy-tailed innovations and a homoskedastic
/// three-period orthonormal transform. Returns the cross-period covariance of
/// `x_1' A x_1` and `x_2' A x_2` and the forms' K-free prediction (zero).
pub fn trace_zero_cross_period(n: usize, draws: usize, seed: u64) -> Result<(Check, Prediction)> {
    if n % 2 != 0 || n == 0 {
        return Err(Error::InvalidInput("the alternating diagonal needs an even, positive n".into()));
    }
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { if i % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 });
    let pi = crate::transform::helmert_weights(&[1.0; 3], &[1.0; 3])?.pi().clone();
    let dgp = VclqDgp {
        sigma2: vec![1.0; 3],
        varrho2: vec![1.0; n],
        innovation: Innovation::CenteredChiSquare,
    };
    let f1 = LqForm::orthogonal(a.clone(), DVector::zeros(n), pi.row(0).transpose());
    let f2 = LqForm::orthogonal(a, DVector::zeros(n), pi.row(1).transpose());
    let pred = predicted_moments(&f1, &f2, &dgp)?;
    let emp = simulate_moments(&f1, &f2, &dgp, draws, seed)?;
    Ok((Check::new(pred.cov, emp.cov, emp.se_cov), pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unit_dgp(n: usize, periods: usize) -> VclqDgp {
        VclqDgp {
            sigma2: vec![1.0; periods],
            varrho2: vec![1.0; n],
            innovation: Innovation::Normal,
        }
    }

    #[test]
    fn symmetric_zero_diagonal_variance() {
        let n = 5;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 / (1 + i + j) as f64 });
        let pi = DVector::from_vec(vec![(0.5f64).sqrt(), -(0.5f64).sqrt()]);
        let f = LqForm::orthogonal(a.clone(), DVector::zeros(n), pi);
        let p = predicted_moments(&f, &f, &unit_dgp(n, 2)).unwrap();
        let expected = 2.0 * (&a * &a).trace();
        assert!((p.cov - expected).abs() < 1e-12);
        assert!(p.complete);
        assert_eq!(p.mean1, 0.0);
    }

    #[test]
    fn pure_linear_variance() {
        let n = 3;
        let mut lin = DVector::zeros(n);
        lin[0] = 1.0;
        let pi = DVector::from_vec(vec![0.6, 0.8]);
        let f = LqForm::orthogonal(DMatrix::zeros(n, n), lin, pi.clone());
        let dgp = VclqDgp {
            sigma2: vec![2.0, 0.5],
            varrho2: vec![3.0, 1.0, 1.0],
            innovation: Innovation::Normal,
        };
        let p = predicted_moments(&f, &f, &dgp).unwrap();
        let pp = 0.36 * 2.0 + 0.64 * 0.5;
        assert!((p.cov - pp * 3.0).abs() < 1e-12);
        assert!(!p.complete, "pi' Sigma pi = {pp} is not 1");
    }

    #[test]
    fn zero_form_is_exactly_zero() {
        let n = 4;
        let f = LqForm::orthogonal(DMatrix::zeros(n, n), DVector::zeros(n), DVector::from_vec(vec![1.0, 0.0]));
        let e = simulate_moments(&f, &f, &unit_dgp(n, 2), 1000, 1).unwrap();
        assert_eq!(e.mean1, 0.0);
        assert_eq!(e.cov, 0.0);
        assert_eq!(z_score(e.cov, 0.0, e.se_cov), 0.0);
    }

    #[test]
    fn simulation_is_chunk_deterministic() {
        let n = 4;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.3 });
        let f = LqForm::orthogonal(a, DVector::from_element(n, 0.2), DVector::from_vec(vec![0.6, 0.8]));
        let dgp = unit_dgp(n, 2);
        let a1 = simulate_forms(&[f.clone()], &dgp, 10_000, 7).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a2 = pool.install(|| simulate_forms(&[f], &dgp, 10_000, 7).unwrap());
        assert_eq!(a1, a2);
    }

    #[test]
    fn random_configs_meet_conditions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let cfg = random_config(8, Innovation::Normal, &mut rng).unwrap();
            let orth = &cfg.pi * DMatrix::from_diagonal(&DVector::from_vec(cfg.dgp.sigma2.clone())) * cfg.pi.transpose();
            assert!((orth - DMatrix::identity(cfg.pi.nrows(), cfg.pi.nrows())).amax() < 1e-12);
            assert!(cfg.t < cfg.s && cfg.s < cfg.pi.nrows());
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|k| k as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
