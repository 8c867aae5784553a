//! Panel data, spatial weight matrices, parameter vectors and design assembly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::sparse::CsrMatrix;

/// How rows without any link are treated when row-normalizing an adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedPolicy {
    /// Keep the row at zero and log a warning.
    #[default]
    ZeroRow,
    Error,
}

/// An `n x n` network matrix with an exactly zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeightMatrix {
    entries: CsrMatrix,
    row_sums: Vec<f64>,
}

impl SpatialWeightMatrix {
    /// Wraps a sparse matrix after checking the zero-diagonal and finiteness invariants.
    pub fn new(entries: CsrMatrix) -> Result<Self> {
        for (i, d) in entries.diagonal().into_iter().enumerate() {
            if d != 0.0 {
                return Err(Error::NonZeroDiagonal { row: i, value: d });
            }
        }
        let row_sums = entries.row_sums();
        if entries.abs_row_sums().iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("weight matrix row"));
        }
        Ok(Self { entries, row_sums })
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Result<Self> {
        Self::new(CsrMatrix::from_dense(dense)?)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            entries: CsrMatrix::zeros(n),
            row_sums: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.dim()
    }

    pub fn entries(&self) -> &CsrMatrix {
        &self.entries
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.entries.mul_vec(v)
    }

    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.entries.mul_dense(m)
    }

    /// Diagonal check used before any moment construction.
    pub fn assert_zero_diagonal(&self) {
        assert_eq!(self.entries.max_abs_diagonal(), 0.0, "weight matrix diagonal must be zero");
    }

    /// Row indices whose row sum is zero.
    pub fn isolated_rows(&self) -> Vec<usize> {
        self.row_sums
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Row-normalizes a 0/1 adjacency matrix: `m_ij = d_ij / sum_l d_il`.
pub fn row_normalize(adjacency: &CsrMatrix, policy: IsolatedPolicy) -> Result<SpatialWeightMatrix> {
    let n = adjacency.dim();
    let mut triplets = Vec::with_capacity(adjacency.nnz());
    let mut isolated = 0usize;
    for i in 0..n {
        let mut deg = 0.0;
        for (j, v) in adjacency.row(i) {
            if v != 1.0 {
                return Err(Error::NonBinaryAdjacency {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            if i == j {
                return Err(Error::NonZeroDiagonal { row: i, value: v });
            }
            deg += 1.0;
        }
        if deg == 0.0 {
            match policy {
                IsolatedPolicy::Error => return Err(Error::IsolatedUnit(i)),
                IsolatedPolicy::ZeroRow => isolated += 1,
            }
            continue;
        }
        triplets.extend(adjacency.row(i).map(|(j, _)| (i, j, 1.0 / deg)));
    }
    if isolated > 0 {
        log::warn!("{isolated} isolated unit(s) kept as zero rows in the weight matrix");
    }
    SpatialWeightMatrix::new(CsrMatrix::from_triplets(n, &triplets)?)
}

/// A covariate column of the panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    /// Weakly exogenous covariate column (0-based).
    X(usize),
    /// Strictly exogenous covariate column (0-based).
    Z(usize),
}

/// One column of `Z_t`: a covariate, optionally premultiplied by a spatial lag matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regressor {
    pub var: Variable,
    /// 0-based index `p` of `M_{p,t}` applied to the covariate, if any.
    #[serde(default)]
    pub spatial_lag: Option<usize>,
}

impl Regressor {
    pub fn own(var: Variable) -> Self {
        Self {
            var,
            spatial_lag: None,
        }
    }

    pub fn lagged(var: Variable, p: usize) -> Self {
        Self {
            var,
            spatial_lag: Some(p),
        }
    }
}

/// Which spatial lags of `y` and which regressors enter `W_t = [M_1 y, .., M_P y, Z_t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Number of spatial lags of the outcome (uses the first `spatial_lags` lag matrices).
    pub spatial_lags: usize,
    pub regressors: Vec<Regressor>,
}

impl DesignSpec {
    pub fn n_delta(&self) -> usize {
        self.spatial_lags + self.regressors.len()
    }
}

/// Observed panel `(y, x, z)` over `n` units and `T` periods with per-period weights.
#[derive(Debug, Clone)]
pub struct PanelData {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    lag_weights: Vec<Vec<Arc<SpatialWeightMatrix>>>,
    error_weights: Vec<Vec<Arc<SpatialWeightMatrix>>>,
    z_time_invariant: Vec<bool>,
}

impl PanelData {
    /// `y` is `n x T`; `x[t]` and `z[t]` are `n x k`; `lag_weights[p][t]` and
    /// `error_weights[q][t]` hold the spatial weights per period.
    pub fn new(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        z: Vec<DMatrix<f64>>,
        lag_weights: Vec<Vec<Arc<SpatialWeightMatrix>>>,
        error_weights: Vec<Vec<Arc<SpatialWeightMatrix>>>,
    ) -> Result<Self> {
        let (n, t) = y.shape();
        if n < 2 || t < 2 {
            return Err(Error::InvalidInput(format!(
                "panel needs n >= 2 and T >= 2, got n = {n}, T = {t}"
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("y"));
        }
        check_dim("x periods", t, x.len())?;
        check_dim("z periods", t, z.len())?;
        let kx = x[0].ncols();
        let kz = z[0].ncols();
        for (name, blocks, k) in [("x", &x, kx), ("z", &z, kz)] {
            for b in blocks.iter() {
                check_dim("covariate rows", n, b.nrows())?;
                check_dim("covariate columns", k, b.ncols())?;
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(if name == "x" { "x" } else { "z" }));
                }
            }
        }
        for family in lag_weights.iter().chain(error_weights.iter()) {
            check_dim("weight periods", t, family.len())?;
            for m in family {
                check_dim("weight matrix dimension", n, m.dim())?;
            }
        }
        let z_time_invariant = (0..kz)
            .map(|c| (1..t).all(|s| z[s].column(c) == z[0].column(c)))
            .collect();
        Ok(Self {
            y,
            x,
            z,
            lag_weights,
            error_weights,
            z_time_invariant,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn periods(&self) -> usize {
        self.y.ncols()
    }

    pub fn kx(&self) -> usize {
        self.x[0].ncols()
    }

    pub fn kz(&self) -> usize {
        self.z[0].ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Outcome vector for period `t` (0-based).
    pub fn y_at(&self, t: usize) -> DVector<f64> {
        self.y.column(t).into_owned()
    }

    pub fn x_at(&self, t: usize) -> &DMatrix<f64> {
        &self.x[t]
    }

    pub fn z_at(&self, t: usize) -> &DMatrix<f64> {
        &self.z[t]
    }

    pub fn n_lag_weights(&self) -> usize {
        self.lag_weights.len()
    }

    pub fn n_error_weights(&self) -> usize {
        self.error_weights.len()
    }

    pub fn lag_weight(&self, p: usize, t: usize) -> &SpatialWeightMatrix {
        &self.lag_weights[p][t]
    }

    pub fn error_weight(&self, q: usize, t: usize) -> &SpatialWeightMatrix {
        &self.error_weights[q][t]
    }

    /// Whether strictly exogenous column `c` is constant over time.
    pub fn z_is_time_invariant(&self, c: usize) -> bool {
        self.z_time_invariant[c]
    }

    /// Covariate column at period `t`.
    pub fn variable_at(&self, var: Variable, t: usize) -> Result<DVector<f64>> {
        match var {
            Variable::X(c) if c < self.kx() => Ok(self.x[t].column(c).into_owned()),
            Variable::Z(c) if c < self.kz() => Ok(self.z[t].column(c).into_owned()),
            Variable::X(c) => Err(Error::BadLagSpec(format!("x column {c} of {}", self.kx()))),
            Variable::Z(c) => Err(Error::BadLagSpec(format!("z column {c} of {}", self.kz()))),
        }
    }

    /// Replaces the outcome matrix, keeping everything else.
    pub fn with_outcome(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::new(
            y,
            self.x.clone(),
            self.z.clone(),
            self.lag_weights.clone(),
            self.error_weights.clone(),
        )
    }
}

/// Assembles `(W_t, Z_t)` for period `t` (0-based). Columns of `W_t` are the
/// spatial lags of `y_t` followed by `Z_t`.
pub fn build_design(
    panel: &PanelData,
    t: usize,
    spec: &DesignSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if t >= panel.periods() {
        return Err(Error::BadLagSpec(format!("period {t} of {}", panel.periods())));
    }
    if spec.spatial_lags > panel.n_lag_weights() {
        return Err(Error::BadLagSpec(format!(
            "{} spatial lags with {} weight matrices",
            spec.spatial_lags,
            panel.n_lag_weights()
        )));
    }
    let n = panel.n();
    let k = spec.regressors.len();
    let mut z_t = DMatrix::zeros(n, k);
    for (c, r) in spec.regressors.iter().enumerate() {
        let mut col = panel.variable_at(r.var, t)?;
        if let Some(p) = r.spatial_lag {
            if p >= panel.n_lag_weights() {
                return Err(Error::BadLagSpec(format!(
                    "spatial lag {p} of {}",
                    panel.n_lag_weights()
                )));
            }
            col = panel.lag_weight(p, t).mul_vec(&col);
        }
        z_t.set_column(c, &col);
    }
    let y_t = panel.y_at(t);
    let mut w_t = DMatrix::zeros(n, spec.n_delta());
    for p in 0..spec.spatial_lags {
        w_t.set_column(p, &panel.lag_weight(p, t).mul_vec(&y_t));
    }
    w_t.view_mut((0, spec.spatial_lags), (n, k)).copy_from(&z_t);
    Ok((w_t, z_t))
}

/// Structural parameters `theta = (lambda, beta, rho, f)` together with the
/// auxiliary variance components `gamma = (sigma_t^2, varrho_i^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    /// Common factor with `f_T = 1`.
    pub f: Vec<f64>,
    /// Time variance components with `sigma_T^2 = 1`.
    pub gamma_sigma: Vec<f64>,
    /// Cross-sectional variance components `varrho_i^2`.
    pub gamma_rho: Vec<f64>,
}

impl ParamVector {
    /// Parameters with unit factor and unit variance components.
    pub fn new(lambda: Vec<f64>, beta: Vec<f64>, rho: Vec<f64>, periods: usize, n: usize) -> Self {
        Self {
            lambda,
            beta,
            rho,
            f: vec![1.0; periods],
            gamma_sigma: vec![1.0; periods],
            gamma_rho: vec![1.0; n],
        }
    }

    pub fn delta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.lambda.len() + self.beta.len(),
            self.lambda.iter().chain(self.beta.iter()).copied(),
        )
    }

    /// Checks the normalizations `f_T = 1`, `sigma_T^2 = 1` and positivity.
    pub fn validate(&self) -> Result<()> {
        if self.f.last() != Some(&1.0) {
            return Err(Error::InvalidInput("factor normalization f_T = 1 violated".into()));
        }
        if self.gamma_sigma.len() != self.f.len() {
            return Err(Error::DimensionMismatch {
                context: "gamma_sigma length",
                expected: self.f.len(),
                actual: self.gamma_sigma.len(),
            });
        }
        if self.gamma_sigma.last() != Some(&1.0) {
            return Err(Error::InvalidInput("normalization sigma_T^2 = 1 violated".into()));
        }
        if self.gamma_sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("sigma_t^2 must be positive".into()));
        }
        if self.gamma_rho.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("varrho_i^2 must be positive".into()));
        }
        let all = self
            .lambda
            .iter()
            .chain(&self.beta)
            .chain(&self.rho)
            .chain(&self.f);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }
}
