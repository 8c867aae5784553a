//! Strategic network formation and outcome generation for simulation studies.
//!
//! A link between `i` and `j` forms when both directed utilities
//! `U_i(j) = a0 + sum_l a_zeta_l |zeta_il - zeta_jl| + a_mu |mu_i - mu_j| + v_ij`
//! are positive and the pair is feasible, meaning `|zeta_i1 - zeta_j1| < c`.
//! The shocks `v_ij` are drawn independently for each ordered pair.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::panel::{row_normalize, IsolatedPolicy, PanelData, SpatialWeightMatrix};
use crate::rng::{self, logistic, logistic_cdf, stage};
use crate::sparse::CsrMatrix;

/// Redraws of an isolated unit's shocks before it is attached to its nearest neighbor.
pub const MAX_REDRAWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsilonDist {
    #[default]
    Logistic,
    Normal,
}

impl UpsilonDist {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            UpsilonDist::Logistic => logistic(rng),
            UpsilonDist::Normal => StandardNormal.sample(rng),
        }
    }

    pub fn cdf(self, x: f64) -> f64 {
        match self {
            UpsilonDist::Logistic => logistic_cdf(x),
            UpsilonDist::Normal => Normal::standard().cdf(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    pub alpha0: f64,
    pub alpha_zeta: Vec<f64>,
    pub alpha_mu: f64,
    pub cutoff: f64,
    #[serde(default)]
    pub upsilon: UpsilonDist,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            alpha_zeta: vec![-0.1],
            alpha_mu: -0.1,
            cutoff: 10.0,
            upsilon: UpsilonDist::Logistic,
        }
    }
}

impl NetworkParams {
    fn systematic(&self, zeta: &DMatrix<f64>, mu: &DVector<f64>, i: usize, j: usize) -> f64 {
        let mut v = self.alpha0 + self.alpha_mu * (mu[i] - mu[j]).abs();
        for (l, a) in self.alpha_zeta.iter().enumerate() {
            v += a * (zeta[(i, l)] - zeta[(j, l)]).abs();
        }
        v
    }

    /// Probability that a feasible pair links, `F(v)^2` with `v` the systematic utility.
    pub fn link_probability(&self, dzeta: &[f64], dmu: f64) -> f64 {
        let mut v = self.alpha0 + self.alpha_mu * dmu.abs();
        for (a, d) in self.alpha_zeta.iter().zip(dzeta) {
            v += a * d.abs();
        }
        self.upsilon.cdf(v).powi(2)
    }
}

/// Feasible partners of each unit (ascending), gated on the first location column.
pub fn feasible_partners(zeta: &DMatrix<f64>, cutoff: f64) -> Vec<Vec<usize>> {
    let n = zeta.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| zeta[(a, 0)].partial_cmp(&zeta[(b, 0)]).unwrap().then(a.cmp(&b)));
    let mut partners = vec![Vec::new(); n];
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if zeta[(j, 0)] - zeta[(i, 0)] >= cutoff {
                break;
            }
            partners[i].push(j);
            partners[j].push(i);
        }
    }
    for p in &mut partners {
        p.sort_unstable();
    }
    partners
}

struct LinkState {
    partners: Vec<Vec<usize>>,
    /// `positive[i][k]`: `U_i(partners[i][k]) > 0`
    positive: Vec<Vec<bool>>,
}

impl LinkState {
    fn draw_row<R: Rng + ?Sized>(&mut self, params: &NetworkParams, zeta: &DMatrix<f64>, mu: &DVector<f64>, i: usize, rng: &mut R) {
        let row: Vec<bool> = self.partners[i]
            .iter()
            .map(|&j| params.systematic(zeta, mu, i, j) + params.upsilon.draw(rng) > 0.0)
            .collect();
        self.positive[i] = row;
    }

    fn linked(&self, i: usize, k: usize) -> bool {
        let j = self.partners[i][k];
        self.positive[i][k] && {
            let back = self.partners[j].binary_search(&i).expect("partner lists are symmetric");
            self.positive[j][back]
        }
    }

    fn degree(&self, i: usize) -> usize {
        (0..self.partners[i].len()).filter(|&k| self.linked(i, k)).count()
    }

    fn adjacency(&self, extra: &[(usize, usize)]) -> Result<CsrMatrix> {
        let mut trip = Vec::new();
        for i in 0..self.partners.len() {
            for (k, &j) in self.partners[i].iter().enumerate() {
                if self.linked(i, k) {
                    trip.push((i, j, 1.0));
                }
            }
        }
        for &(i, j) in extra {
            trip.push((i, j, 1.0));
            trip.push((j, i, 1.0));
        }
        let mut m = CsrMatrix::from_triplets(self.partners.len(), &trip)?;
        // attachments may duplicate an existing link
        m = m.map_values(|v| v.min(1.0));
        Ok(m)
    }
}

fn initial_state<R: Rng + ?Sized>(params: &NetworkParams, zeta: &DMatrix<f64>, mu: &DVector<f64>, rng: &mut R) -> Result<LinkState> {
    let n = zeta.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("network needs at least two units".into()));
    }
    check_dim("mu length", n, mu.len())?;
    if zeta.ncols() < params.alpha_zeta.len().max(1) {
        return Err(Error::DimensionMismatch {
            context: "zeta columns",
            expected: params.alpha_zeta.len().max(1),
            actual: zeta.ncols(),
        });
    }
    let partners = feasible_partners(zeta, params.cutoff);
    let mut state = LinkState {
        positive: vec![Vec::new(); n],
        partners,
    };
    for i in 0..n {
        state.draw_row(params, zeta, mu, i, rng);
    }
    Ok(state)
}

/// Symmetric zero-diagonal 0/1 adjacency from one draw of the link shocks.
pub fn form_network<R: Rng + ?Sized>(params: &NetworkParams, zeta: &DMatrix<f64>, mu: &DVector<f64>, rng: &mut R) -> Result<CsrMatrix> {
    initial_state(params, zeta, mu, rng)?.adjacency(&[])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairLog {
    /// Units whose shocks were redrawn.
    pub redrawn: usize,
    /// Units attached to their nearest neighbor after the redraws failed.
    pub attached: usize,
}

/// Like [`form_network`], but every unit ends up with at least one link: an
/// isolated unit's own shocks are redrawn up to 50 times from `repair_rng`,
/// after which it is linked to its nearest neighbor in the first location column.
pub fn form_connected_network<R: Rng + ?Sized, S: Rng + ?Sized>(
    params: &NetworkParams,
    zeta: &DMatrix<f64>,
    mu: &DVector<f64>,
    rng: &mut R,
    repair_rng: &mut S,
) -> Result<(CsrMatrix, RepairLog)> {
    let mut state = initial_state(params, zeta, mu, rng)?;
    let n = zeta.nrows();
    let mut log = RepairLog::default();
    let mut extra: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        if state.degree(i) > 0 || extra.iter().any(|&(a, b)| a == i || b == i) {
            continue;
        }
        log.redrawn += 1;
        let mut ok = false;
        for _ in 0..MAX_REDRAWS {
            state.draw_row(params, zeta, mu, i, repair_rng);
            if state.degree(i) > 0 {
                ok = true;
                break;
            }
        }
        if !ok {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (zeta[(a, 0)] - zeta[(i, 0)]).abs();
                    let db = (zeta[(b, 0)] - zeta[(i, 0)]).abs();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .expect("at least two units");
            extra.push((i, nearest));
            log.attached += 1;
        }
    }
    if log.redrawn > 0 {
        log::info!(
            "network repair: {} isolated units redrawn, {} attached to nearest neighbor",
            log.redrawn,
            log.attached
        );
    }
    Ok((state.adjacency(&extra)?, log))
}

/// Solves `(I - coef M) y = b`, by fixed-point iteration when it contracts and
/// by dense LU otherwise. The residual must fall below `1e-12 max(1, |b|_inf)`.
pub fn solve_spatial(m: &SpatialWeightMatrix, coef: f64, b: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("right-hand side", m.dim(), b.len())?;
    let tol = 1e-12 * b.amax().max(1.0);
    let residual = |y: &DVector<f64>| (y - m.mul_vec(y) * coef - b).amax();
    let norm = m.entries().abs_row_sums().into_iter().fold(0.0f64, f64::max);
    if coef == 0.0 {
        return Ok(b.clone());
    }
    if coef.abs() * norm < 1.0 {
        let mut y = b.clone();
        for _ in 0..10_000 {
            let next = b + m.mul_vec(&y) * coef;
            let change = (&next - &y).amax();
            y = next;
            if change <= 1e-15 * y.amax().max(1.0) {
                break;
            }
        }
        if residual(&y) < tol {
            return Ok(y);
        }
    }
    let dense = DMatrix::identity(m.dim(), m.dim()) - m.entries().to_dense() * coef;
    let y = dense.lu().solve(b).ok_or(Error::SingularSystem { residual: f64::INFINITY })?;
    let r = residual(&y);
    if r < tol {
        Ok(y)
    } else {
        Err(Error::SingularSystem { residual: r })
    }
}

/// Outcome equation `y_t = (I - lambda M)^{-1} (beta_1 z_t + beta_2 M z_t + e_t)` with
/// `e_t = (I - rho M)^{-1} (mu f_t + u_t)` and `u_it ~ N(0, sigma_t^2 varrho_i^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub lambda: f64,
    pub beta: [f64; 2],
    #[serde(default)]
    pub rho: Option<f64>,
    pub f: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default)]
    pub varrho2: Option<Vec<f64>>,
}

impl OutcomeSpec {
    /// Unit factor and unit variances over `periods` periods.
    pub fn simple(lambda: f64, beta: [f64; 2], periods: usize) -> Self {
        Self {
            lambda,
            beta,
            rho: None,
            f: vec![1.0; periods],
            sigma2: vec![1.0; periods],
            varrho2: None,
        }
    }
}

/// Draws `z_t` and `u_t` (standard normal, in that order, period by period) and
/// solves for `y_t`. The panel's strictly exogenous block is `[z_t, extra]`.
pub fn generate_outcomes<R: Rng + ?Sized>(
    m: &Arc<SpatialWeightMatrix>,
    spec: &OutcomeSpec,
    mu: &DVector<f64>,
    extra: Option<&DVector<f64>>,
    rng: &mut R,
) -> Result<PanelData> {
    let n = m.dim();
    let periods = spec.f.len();
    check_dim("mu length", n, mu.len())?;
    check_dim("sigma2 length", periods, spec.sigma2.len())?;
    let scale: Vec<f64> = match &spec.varrho2 {
        Some(v) => {
            check_dim("varrho2 length", n, v.len())?;
            v.iter().map(|x| x.sqrt()).collect()
        }
        None => vec![1.0; n],
    };
    let z: Vec<DVector<f64>> = (0..periods)
        .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(rng)))
        .collect();
    let u: Vec<DVector<f64>> = (0..periods)
        .map(|t| {
            let sd = spec.sigma2[t].sqrt();
            DVector::from_fn(n, |i, _| {
                let e: f64 = StandardNormal.sample(rng);
                e * sd * scale[i]
            })
        })
        .collect();
    let mut y = DMatrix::zeros(n, periods);
    let mut zs = Vec::with_capacity(periods);
    for t in 0..periods {
        let shock = mu * spec.f[t] + &u[t];
        let eps = match spec.rho {
            Some(r) => solve_spatial(m, r, &shock)?,
            None => shock,
        };
        let b = &z[t] * spec.beta[0] + m.mul_vec(&z[t]) * spec.beta[1] + eps;
        y.set_column(t, &solve_spatial(m, spec.lambda, &b)?);
        let mut zt = DMatrix::zeros(n, if extra.is_some() { 2 } else { 1 });
        zt.set_column(0, &z[t]);
        if let Some(e) = extra {
            zt.set_column(1, e);
        }
        zs.push(zt);
    }
    let lag = vec![vec![m.clone(); periods]];
    let err = if spec.rho.is_some() { vec![vec![m.clone(); periods]] } else { vec![] };
    PanelData::new(y, vec![DMatrix::zeros(n, 0); periods], zs, lag, err)
}

/// Exogenous proxy weights `m*_ij = d*_ij / sum_l d*_il` with
/// `d*_ij = f(zeta_i, zeta_j) 1{|zeta_i1 - zeta_j1| < c}`.
pub fn build_mstar<F>(zeta: &DMatrix<f64>, cutoff: f64, f_link: F, policy: IsolatedPolicy) -> Result<SpatialWeightMatrix>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let n = zeta.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| zeta.row(i).iter().copied().collect()).collect();
    let partners = feasible_partners(zeta, cutoff);
    let mut trip = Vec::new();
    for (i, ps) in partners.iter().enumerate() {
        let w: Vec<(usize, f64)> = ps.iter().map(|&j| (j, f_link(&rows[i], &rows[j]))).collect();
        if w.iter().any(|(_, v)| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("link function must be non-negative and finite".into()));
        }
        let total: f64 = w.iter().map(|(_, v)| v).sum();
        if total == 0.0 {
            match policy {
                IsolatedPolicy::Error => return Err(Error::IsolatedUnit(i)),
                IsolatedPolicy::ZeroRow => {
                    log::warn!("unit {i} has no proxy links; its weight row is zero");
                    continue;
                }
            }
        }
        trip.extend(w.into_iter().filter(|(_, v)| *v > 0.0).map(|(j, v)| (i, j, v / total)));
    }
    SpatialWeightMatrix::new(CsrMatrix::from_triplets(n, &trip)?)
}

/// One cell of the simulation grid. `beta_2 = -(lambda_0 + delta) beta_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDesign {
    pub n: usize,
    #[serde(default = "default_periods")]
    pub periods: usize,
    pub lambda0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    pub delta: f64,
    pub seed: u64,
    pub replications: usize,
    /// Unit `i` (1-based) draws its location from `U[i, i + width]`.
    #[serde(default = "default_zeta_width")]
    pub zeta_width: f64,
    #[serde(default)]
    pub network: NetworkParams,
}

fn default_periods() -> usize {
    2
}

fn default_beta1() -> f64 {
    1.0
}

fn default_zeta_width() -> f64 {
    2.0
}

impl McDesign {
    pub fn new(n: usize, lambda0: f64, delta: f64, replications: usize, seed: u64) -> Self {
        Self {
            n,
            periods: 2,
            lambda0,
            beta1: 1.0,
            delta,
            seed,
            replications,
            zeta_width: 2.0,
            network: NetworkParams::default(),
        }
    }

    pub fn beta2(&self) -> f64 {
        -(self.lambda0 + self.delta) * self.beta1
    }

    pub fn outcome_spec(&self) -> OutcomeSpec {
        OutcomeSpec::simple(self.lambda0, [self.beta1, self.beta2()], self.periods)
    }
}

/// Everything drawn for one replication.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    pub adjacency: CsrMatrix,
    pub m: Arc<SpatialWeightMatrix>,
    pub zeta: DVector<f64>,
    pub mu: DVector<f64>,
    pub repair: RepairLog,
}

/// Locations `zeta_i ~ U[i, i + width]` (units numbered from 1).
pub fn draw_locations<R: Rng + ?Sized>(n: usize, width: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |i, _| (i + 1) as f64 + width * rng.random::<f64>())
}

/// Draws replication `rep` of `design` from its dedicated random streams.
pub fn simulate_replication(design: &McDesign, rep: u64) -> Result<SimulatedPanel> {
    let seed = design.seed;
    let zeta = draw_locations(design.n, design.zeta_width, &mut rng::stream(seed, rep, stage::LOCATIONS));
    let mut r_mu = rng::stream(seed, rep, stage::EFFECTS);
    let mu = DVector::from_fn(design.n, |_, _| StandardNormal.sample(&mut r_mu));
    let zeta_m = DMatrix::from_column_slice(design.n, 1, zeta.as_slice());
    let (adjacency, repair) = form_connected_network(
        &design.network,
        &zeta_m,
        &mu,
        &mut rng::stream(seed, rep, stage::LINKS),
        &mut rng::stream(seed, rep, stage::REPAIR),
    )?;
    let m = Arc::new(row_normalize(&adjacency, IsolatedPolicy::Error)?);
    let panel = generate_outcomes(
        &m,
        &design.outcome_spec(),
        &mu,
        Some(&zeta),
        &mut rng::stream(seed, rep, stage::COVARIATES),
    )?;
    Ok(SimulatedPanel {
        panel,
        adjacency,
        m,
        zeta,
        mu,
        repair,
    })
}
