//! Linear and quadratic moment conditions on forward-differenced residuals.
//!
//! For each transformed period `t` the stacked block is
//! `n^{-1/2} [H_t' u*_t ; (u*_t' A_t^r u*_t)_r]`, linear moments first.
//! Blocks are concatenated in period order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{independent_columns, select_columns, sym_inverse, SymInverse};
use crate::panel::{DesignSpec, PanelData, ParamVector, SpatialWeightMatrix, Variable};
use crate::sparse::CsrMatrix;
use crate::transform::{helmert_derivative, helmert_weights, HelmertTransform};

/// Relative residual norm below which an instrument column counts as redundant.
pub const INSTRUMENT_PRUNE_TOL: f64 = 1e-10;

/// Relative eigenvalue floor for the weight-matrix inverse.
pub const WEIGHT_EIGEN_FLOOR: f64 = 1e-10;

/// Relative finite-difference step for factor derivatives.
pub const FACTOR_FD_STEP: f64 = 1e-6;

/// Model structure: which regressors enter, how many error lags, and whether
/// the factor `f_1..f_{T-1}` is a free parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub design: DesignSpec,
    #[serde(default)]
    pub error_lags: usize,
    #[serde(default)]
    pub estimate_factor: bool,
}

impl ModelSpec {
    pub fn n_delta(&self) -> usize {
        self.design.n_delta()
    }

    /// Length of the free parameter vector `(lambda, beta, rho, f_1..f_{T-1})`.
    pub fn n_theta(&self, periods: usize) -> usize {
        self.n_delta() + self.error_lags + if self.estimate_factor { periods - 1 } else { 0 }
    }

    /// Flattens the free parameters of `p`.
    pub fn theta_vec(&self, p: &ParamVector) -> DVector<f64> {
        let mut v: Vec<f64> = p.lambda.iter().chain(&p.beta).chain(&p.rho).copied().collect();
        if self.estimate_factor {
            v.extend_from_slice(&p.f[..p.f.len() - 1]);
        }
        DVector::from_vec(v)
    }

    /// Writes `theta` into a copy of `template`.
    pub fn apply_theta(&self, template: &ParamVector, theta: &[f64]) -> ParamVector {
        let mut p = template.clone();
        let nl = self.design.spatial_lags;
        let nb = self.design.regressors.len();
        let nr = self.error_lags;
        p.lambda = theta[..nl].to_vec();
        p.beta = theta[nl..nl + nb].to_vec();
        p.rho = theta[nl + nb..nl + nb + nr].to_vec();
        if self.estimate_factor {
            let t = p.f.len();
            p.f[..t - 1].copy_from_slice(&theta[nl + nb + nr..]);
        }
        p
    }

    /// Names of the free parameters in `theta` order.
    pub fn theta_names(&self, periods: usize) -> Vec<String> {
        let mut names = Vec::new();
        for p in 0..self.design.spatial_lags {
            names.push(format!("lambda_{}", p + 1));
        }
        for k in 0..self.design.regressors.len() {
            names.push(format!("beta_{}", k + 1));
        }
        for q in 0..self.error_lags {
            names.push(format!("rho_{}", q + 1));
        }
        if self.estimate_factor {
            for t in 0..periods - 1 {
                names.push(format!("f_{}", t + 1));
            }
        }
        names
    }
}

/// Per-period regressors and their error-weight lags, computed once per panel.
#[derive(Debug, Clone)]
pub struct ModelData {
    spec: ModelSpec,
    n: usize,
    periods: usize,
    y: Vec<DVector<f64>>,
    w: Vec<DMatrix<f64>>,
    /// `[s][q]`: `M_{q,s} y_s` and `M_{q,s} W_s`.
    my: Vec<Vec<DVector<f64>>>,
    mw: Vec<Vec<DMatrix<f64>>>,
}

impl ModelData {
    pub fn new(panel: &PanelData, spec: &ModelSpec) -> Result<Self> {
        if spec.error_lags > panel.n_error_weights() {
            return Err(Error::BadLagSpec(format!(
                "{} error lags with {} error weight matrices",
                spec.error_lags,
                panel.n_error_weights()
            )));
        }
        let periods = panel.periods();
        let mut y = Vec::with_capacity(periods);
        let mut w = Vec::with_capacity(periods);
        let mut my = Vec::with_capacity(periods);
        let mut mw = Vec::with_capacity(periods);
        for s in 0..periods {
            let (w_s, _) = crate::panel::build_design(panel, s, &spec.design)?;
            let y_s = panel.y_at(s);
            let mut my_s = Vec::new();
            let mut mw_s = Vec::new();
            for q in 0..spec.error_lags {
                let m = panel.error_weight(q, s);
                m.assert_zero_diagonal();
                my_s.push(m.mul_vec(&y_s));
                mw_s.push(m.mul_dense(&w_s));
            }
            y.push(y_s);
            w.push(w_s);
            my.push(my_s);
            mw.push(mw_s);
        }
        Ok(Self {
            spec: spec.clone(),
            n: panel.n(),
            periods,
            y,
            w,
            my,
            mw,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn y_at(&self, s: usize) -> &DVector<f64> {
        &self.y[s]
    }

    pub fn w_at(&self, s: usize) -> &DMatrix<f64> {
        &self.w[s]
    }

    /// `R_s(rho) W_s`.
    fn filtered_w(&self, s: usize, rho: &[f64]) -> DMatrix<f64> {
        let mut out = self.w[s].clone();
        for (q, &r) in rho.iter().enumerate() {
            if r != 0.0 {
                out -= &self.mw[s][q] * r;
            }
        }
        out
    }

    /// `R_s(rho) y_s`.
    fn filtered_y(&self, s: usize, rho: &[f64]) -> DVector<f64> {
        let mut out = self.y[s].clone();
        for (q, &r) in rho.iter().enumerate() {
            if r != 0.0 {
                out -= &self.my[s][q] * r;
            }
        }
        out
    }

    /// Forward-differenced, scaled outcome and regressors at a fixed `(rho, f, gamma)`:
    /// `u*_t = y*_t - W*_t delta`. Used by the linear comparators and the profile step.
    pub fn transformed_system(&self, params: &ParamVector) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
        let pi = self.transform(params)?;
        let inv = inverse_scale(&params.gamma_rho, self.n)?;
        let ry: Vec<DVector<f64>> = (0..self.periods).map(|s| self.filtered_y(s, &params.rho)).collect();
        let rw: Vec<DMatrix<f64>> = (0..self.periods).map(|s| self.filtered_w(s, &params.rho)).collect();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for t in 0..pi.rows() {
            let mut yt = DVector::zeros(self.n);
            let mut wt = DMatrix::zeros(self.n, self.spec.n_delta());
            for s in t..self.periods {
                let c = pi.pi()[(t, s)];
                if c != 0.0 {
                    yt.axpy(c, &ry[s], 1.0);
                    wt += &rw[s] * c;
                }
            }
            for i in 0..self.n {
                yt[i] *= inv[i];
                for j in 0..wt.ncols() {
                    wt[(i, j)] *= inv[i];
                }
            }
            ys.push(yt);
            ws.push(wt);
        }
        Ok((ys, ws))
    }

    pub fn transform(&self, params: &ParamVector) -> Result<HelmertTransform> {
        check_dim("factor length", self.periods, params.f.len())?;
        helmert_weights(&params.f, &params.gamma_sigma)
    }
}

fn inverse_scale(gamma_rho: &[f64], n: usize) -> Result<Vec<f64>> {
    check_dim("gamma_rho length", n, gamma_rho.len())?;
    gamma_rho
        .iter()
        .map(|&g| {
            if g > 0.0 && g.is_finite() {
                Ok(1.0 / g.sqrt())
            } else {
                Err(Error::InvalidInput("varrho_i^2 must be positive".into()))
            }
        })
        .collect()
}

/// Instruments and quadratic weights for one transformed period.
#[derive(Debug, Clone)]
pub struct MomentBlock {
    pub h: DMatrix<f64>,
    pub a: Vec<Arc<CsrMatrix>>,
}

/// Moment blocks for `t = 1..T-P`, with the stacked index layout.
#[derive(Debug, Clone)]
pub struct MomentSet {
    blocks: Vec<MomentBlock>,
    offsets: Vec<usize>,
    n: usize,
}

impl MomentSet {
    /// Validates that every `A` is exactly symmetric with an exactly zero diagonal.
    pub fn new(blocks: Vec<MomentBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidInput("moment set needs at least one period".into()));
        }
        let n = blocks[0].h.nrows();
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut off = 0;
        for b in &blocks {
            check_dim("instrument rows", n, b.h.nrows())?;
            if b.h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("instruments"));
            }
            for a in &b.a {
                check_dim("quadratic weight dimension", n, a.dim())?;
                if a.max_abs_diagonal() != 0.0 {
                    return Err(Error::NonZeroDiagonal {
                        row: a.diagonal().iter().position(|&d| d != 0.0).unwrap_or(0),
                        value: a.max_abs_diagonal(),
                    });
                }
                if !a.is_symmetric() {
                    return Err(Error::InvalidInput("quadratic weight matrix is not symmetric".into()));
                }
            }
            offsets.push(off);
            off += b.h.ncols() + b.a.len();
        }
        offsets.push(off);
        Ok(Self { blocks, offsets, n })
    }

    pub fn blocks(&self) -> &[MomentBlock] {
        &self.blocks
    }

    pub fn periods(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total number of stacked moments.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global index of linear moment `r` in period `t`.
    pub fn linear_index(&self, t: usize, r: usize) -> usize {
        self.offsets[t] + r
    }

    /// Global index of quadratic moment `r` in period `t`.
    pub fn quadratic_index(&self, t: usize, r: usize) -> usize {
        self.offsets[t] + self.blocks[t].h.ncols() + r
    }

    pub fn n_linear(&self) -> usize {
        self.blocks.iter().map(|b| b.h.ncols()).sum()
    }

    pub fn n_quadratic(&self) -> usize {
        self.blocks.iter().map(|b| b.a.len()).sum()
    }

    /// Same instruments with all quadratic moments removed.
    pub fn linear_only(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| MomentBlock {
                h: b.h.clone(),
                a: Vec::new(),
            })
            .collect();
        Self::new(blocks).expect("subset of a valid moment set")
    }

    /// Same quadratic weights with the instruments replaced by `h` per period.
    pub fn with_instruments(&self, h: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim("instrument periods", self.periods(), h.len())?;
        let blocks = self
            .blocks
            .iter()
            .zip(h)
            .map(|(b, h)| MomentBlock { h, a: b.a.clone() })
            .collect();
        Self::new(blocks)
    }
}

/// Stacked moment vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentValue {
    pub m: DVector<f64>,
    /// `(period, is_quadratic, index within kind)` per entry.
    pub layout: Vec<(usize, bool, usize)>,
}

/// Which data enter the instrument matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentSource {
    /// `sum_s pi_ts M_s^k z_s` for strictly exogenous columns.
    #[default]
    Transformed,
    /// `M_s^k z_s` for every period `s`.
    Levels,
    /// Both of the above.
    Both,
    /// Levels of the current period only, `M_t^k z_t`.
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentSpec {
    pub variables: Vec<Variable>,
    pub max_order: usize,
    #[serde(default)]
    pub source: InstrumentSource,
    /// Index of the lag weight family whose powers multiply the variables.
    #[serde(default)]
    pub weight: usize,
}

/// Quadratic weight constructions from a spatial weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadKind {
    /// `(M + M') / 2`
    Sym,
    /// `M'M - diag(M'M)`
    Gram,
    /// `Mbar^tau - diag(Mbar^tau)` with `Mbar = (M + M') / 2`
    SymPower(u32),
    /// `(M'M)^tau - diag((M'M)^tau)`
    GramPower(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentSpec {
    pub instruments: InstrumentSpec,
    #[serde(default)]
    pub quadratic: Vec<QuadKind>,
    /// Index of the lag weight family used for the quadratic weights.
    #[serde(default)]
    pub quadratic_weight: usize,
}

fn matrix_power_columns(m: &SpatialWeightMatrix, base: &DMatrix<f64>, order: usize) -> Vec<DMatrix<f64>> {
    let mut out = vec![base.clone()];
    for k in 1..=order {
        let next = m.mul_dense(&out[k - 1]);
        out.push(next);
    }
    out
}

/// Instrument blocks for each transformed period of `transform`. The columns of
/// each block are the linearly independent members of `[v, Mv, ..., M^s v]` for
/// the selected variables, pruned with relative tolerance `1e-10`. Strictly
/// exogenous variables may use all periods; weakly exogenous ones use levels up
/// to the current period only. Fails when fewer than `required` independent
/// columns remain over all periods.
pub fn build_instruments(
    panel: &PanelData,
    spec: &InstrumentSpec,
    transform: &HelmertTransform,
    required: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let periods = panel.periods();
    check_dim("transform periods", periods, transform.periods())?;
    if spec.max_order > 0 && spec.weight >= panel.n_lag_weights() {
        return Err(Error::BadLagSpec(format!(
            "instrument weight {} of {}",
            spec.weight,
            panel.n_lag_weights()
        )));
    }
    let n = panel.n();
    // powers[s][k]: M_s^k applied to the selected variables at period s.
    let mut powers: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(periods);
    for s in 0..periods {
        let mut base = DMatrix::zeros(n, spec.variables.len());
        for (c, &v) in spec.variables.iter().enumerate() {
            base.set_column(c, &panel.variable_at(v, s)?);
        }
        powers.push(if spec.max_order > 0 {
            matrix_power_columns(panel.lag_weight(spec.weight, s), &base, spec.max_order)
        } else {
            vec![base]
        });
    }
    let is_strict: Vec<bool> = spec.variables.iter().map(|v| matches!(v, Variable::Z(_))).collect();
    let invariant: Vec<bool> = spec
        .variables
        .iter()
        .map(|v| match *v {
            Variable::Z(c) => panel.z_is_time_invariant(c),
            Variable::X(_) => false,
        })
        .collect();
    let weights_invariant = spec.max_order == 0
        || (1..periods).all(|s| {
            panel.lag_weight(spec.weight, s).entries() == panel.lag_weight(spec.weight, 0).entries()
        });
    let mut blocks = Vec::with_capacity(transform.rows());
    let mut total = 0;
    for t in 0..transform.rows() {
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for k in 0..=spec.max_order {
            for c in 0..spec.variables.len() {
                let use_transformed = matches!(spec.source, InstrumentSource::Transformed | InstrumentSource::Both);
                let use_levels = matches!(spec.source, InstrumentSource::Levels | InstrumentSource::Both);
                if is_strict[c] && use_transformed {
                    let mut acc = DVector::zeros(n);
                    for s in t..periods {
                        let w = transform.pi()[(t, s)];
                        if w != 0.0 {
                            acc.axpy(w, &powers[s][k].column(c), 1.0);
                        }
                    }
                    cols.push(acc);
                }
                if is_strict[c] && matches!(spec.source, InstrumentSource::Current) {
                    cols.push(powers[t][k].column(c).into_owned());
                } else if !is_strict[c] || use_levels {
                    let last = if is_strict[c] { periods - 1 } else { t };
                    let first_only = invariant[c] && weights_invariant;
                    for s in 0..=last {
                        if first_only && s > 0 {
                            break;
                        }
                        cols.push(powers[s][k].column(c).into_owned());
                    }
                }
            }
        }
        let raw = if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        let keep = independent_columns(&raw, INSTRUMENT_PRUNE_TOL);
        if keep.len() < raw.ncols() {
            log::debug!(
                "period {}: pruned {} of {} instrument columns",
                t + 1,
                raw.ncols() - keep.len(),
                raw.ncols()
            );
        }
        total += keep.len();
        blocks.push(select_columns(&raw, &keep));
    }
    if total < required {
        return Err(Error::RankDeficientInstruments {
            available: total,
            required,
        });
    }
    Ok(blocks)
}

/// Quadratic weight matrices built from `m`, each exactly symmetric with the
/// diagonal removed.
pub fn build_quadratic_weights(m: &SpatialWeightMatrix, kinds: &[QuadKind]) -> Result<Vec<CsrMatrix>> {
    let e = m.entries();
    let mbar = e.symmetrized();
    let gram = e.transpose().matmul(e);
    kinds
        .iter()
        .map(|kind| {
            let raw = match *kind {
                QuadKind::Sym => mbar.clone(),
                QuadKind::Gram => gram.clone(),
                QuadKind::SymPower(tau) | QuadKind::GramPower(tau) => {
                    if tau == 0 {
                        return Err(Error::InvalidInput("quadratic weight power must be >= 1".into()));
                    }
                    let base = if matches!(kind, QuadKind::SymPower(_)) { &mbar } else { &gram };
                    let mut acc = base.clone();
                    for _ in 1..tau {
                        acc = acc.matmul(base);
                    }
                    acc
                }
            };
            // products of symmetric matrices can pick up rounding asymmetry
            Ok(raw.symmetrized().without_diagonal())
        })
        .collect()
}

impl MomentSet {
    /// Builds instruments and quadratic weights from the panel. The transform
    /// used for transformed instruments is evaluated at `(f_bar, sigma_bar)`.
    pub fn build(
        panel: &PanelData,
        spec: &MomentSpec,
        transform: &HelmertTransform,
        required: usize,
    ) -> Result<Self> {
        let h = build_instruments(panel, &spec.instruments, transform, required)?;
        let mut blocks = Vec::with_capacity(h.len());
        if !spec.quadratic.is_empty() && spec.quadratic_weight >= panel.n_lag_weights() {
            return Err(Error::BadLagSpec(format!(
                "quadratic weight {} of {}",
                spec.quadratic_weight,
                panel.n_lag_weights()
            )));
        }
        let mut cache: Option<(usize, Vec<Arc<CsrMatrix>>)> = None;
        for (t, h_t) in h.into_iter().enumerate() {
            let a = if spec.quadratic.is_empty() {
                Vec::new()
            } else {
                let m = panel.lag_weight(spec.quadratic_weight, t);
                m.assert_zero_diagonal();
                match &cache {
                    Some((t0, a)) if panel.lag_weight(spec.quadratic_weight, *t0).entries() == m.entries() => {
                        a.clone()
                    }
                    _ => {
                        let a: Vec<Arc<CsrMatrix>> = build_quadratic_weights(m, &spec.quadratic)?
                            .into_iter()
                            .map(Arc::new)
                            .collect();
                        cache = Some((t, a.clone()));
                        a
                    }
                }
            };
            blocks.push(MomentBlock { h: h_t, a });
        }
        Self::new(blocks)
    }
}

/// Intermediate quantities of the residual pipeline.
struct Pipeline {
    pi: DMatrix<f64>,
    inv: Vec<f64>,
    /// `v_s = R_s(rho)(y_s - W_s delta)`
    v: Vec<DVector<f64>>,
    /// `[s][q]`: `M_{q,s} e_s`
    me: Vec<Vec<DVector<f64>>>,
    /// `u*_t` per transformed period.
    ustar: Vec<DVector<f64>>,
}

fn run_pipeline(theta: &ParamVector, data: &ModelData) -> Result<Pipeline> {
    let spec = data.spec();
    check_dim("lambda length", spec.design.spatial_lags, theta.lambda.len())?;
    check_dim("beta length", spec.design.regressors.len(), theta.beta.len())?;
    check_dim("rho length", spec.error_lags, theta.rho.len())?;
    let transform = data.transform(theta)?;
    let inv = inverse_scale(&theta.gamma_rho, data.n())?;
    let delta = theta.delta();
    let mut v = Vec::with_capacity(data.periods());
    let mut me = Vec::with_capacity(data.periods());
    for s in 0..data.periods() {
        let e = data.y_at(s) - data.w_at(s) * &delta;
        let mut v_s = e;
        let mut me_s = Vec::with_capacity(spec.error_lags);
        for q in 0..spec.error_lags {
            let m_e = &data.my[s][q] - &data.mw[s][q] * &delta;
            v_s.axpy(-theta.rho[q], &m_e, 1.0);
            me_s.push(m_e);
        }
        v.push(v_s);
        me.push(me_s);
    }
    let pi = transform.pi().clone();
    let mut ustar = Vec::with_capacity(pi.nrows());
    for t in 0..pi.nrows() {
        let mut u = DVector::zeros(data.n());
        for (s, v_s) in v.iter().enumerate().skip(t) {
            let c = pi[(t, s)];
            if c != 0.0 {
                u.axpy(c, v_s, 1.0);
            }
        }
        for (ui, &w) in u.iter_mut().zip(&inv) {
            *ui *= w;
        }
        ustar.push(u);
    }
    Ok(Pipeline { pi, inv, v, me, ustar })
}

/// Forward-differenced, scaled residuals `u*_t(theta, gamma)` for each transformed period.
pub fn transformed_residuals(theta: &ParamVector, data: &ModelData) -> Result<Vec<DVector<f64>>> {
    Ok(run_pipeline(theta, data)?.ustar)
}

fn check_compatible(data: &ModelData, ms: &MomentSet) -> Result<()> {
    check_dim("moment set units", data.n(), ms.n())?;
    check_dim("moment set periods", data.periods() - 1, ms.periods())
}

fn stack_moments(ms: &MomentSet, ustar: &[DVector<f64>]) -> MomentValue {
    let scale = 1.0 / (ms.n() as f64).sqrt();
    let mut m = DVector::zeros(ms.len());
    let mut layout = Vec::with_capacity(ms.len());
    for (t, (block, u)) in ms.blocks().iter().zip(ustar).enumerate() {
        let lin = block.h.tr_mul(u);
        for r in 0..block.h.ncols() {
            m[ms.linear_index(t, r)] = lin[r] * scale;
            layout.push((t, false, r));
        }
        for (r, a) in block.a.iter().enumerate() {
            m[ms.quadratic_index(t, r)] = a.quad_form(u) * scale;
            layout.push((t, true, r));
        }
    }
    MomentValue { m, layout }
}

/// Stacked normalized moment vector at `theta` (including its variance components).
pub fn evaluate_moments(theta: &ParamVector, data: &ModelData, ms: &MomentSet) -> Result<MomentValue> {
    check_compatible(data, ms)?;
    let pipe = run_pipeline(theta, data)?;
    Ok(stack_moments(ms, &pipe.ustar))
}

/// Moments together with `d mbar / d theta` (`p x dim(theta)`), the latter
/// analytic in `(lambda, beta, rho)` and by central differences of `Pi` in `f`.
pub fn moments_and_jacobian(
    theta: &ParamVector,
    data: &ModelData,
    ms: &MomentSet,
) -> Result<(MomentValue, DMatrix<f64>)> {
    check_compatible(data, ms)?;
    let spec = data.spec();
    let pipe = run_pipeline(theta, data)?;
    let value = stack_moments(ms, &pipe.ustar);
    let n = data.n();
    let periods = data.periods();
    let kd = spec.n_delta();
    let nq = spec.error_lags;
    let dim = spec.n_theta(periods);
    let rw: Vec<DMatrix<f64>> = (0..periods).map(|s| data.filtered_w(s, &theta.rho)).collect();
    let dpi: Vec<DMatrix<f64>> = if spec.estimate_factor {
        (0..periods - 1)
            .map(|k| helmert_derivative(&theta.f, &theta.gamma_sigma, k, FACTOR_FD_STEP))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let scale = 1.0 / (n as f64).sqrt();
    let mut jac = DMatrix::zeros(ms.len(), dim);
    for (t, block) in ms.blocks().iter().enumerate() {
        // d u*_t / d theta
        let mut d = DMatrix::zeros(n, dim);
        for s in t..periods {
            let c = pipe.pi[(t, s)];
            if c == 0.0 {
                continue;
            }
            let mut dv = d.view_mut((0, 0), (n, kd));
            dv -= &rw[s] * c;
            for q in 0..nq {
                let mut col = d.column_mut(kd + q);
                col.axpy(-c, &pipe.me[s][q], 1.0);
            }
        }
        for (k, dp) in dpi.iter().enumerate() {
            let mut col = d.column_mut(kd + nq + k);
            for s in 0..periods {
                let c = dp[(t, s)];
                if c != 0.0 {
                    col.axpy(c, &pipe.v[s], 1.0);
                }
            }
        }
        for i in 0..n {
            let w = pipe.inv[i];
            for j in 0..dim {
                d[(i, j)] *= w;
            }
        }
        let lin = block.h.tr_mul(&d) * scale;
        for r in 0..block.h.ncols() {
            jac.row_mut(ms.linear_index(t, r)).copy_from(&lin.row(r));
        }
        let u = &pipe.ustar[t];
        for (r, a) in block.a.iter().enumerate() {
            let au = a.mul_vec(u);
            let g = d.tr_mul(&au) * (2.0 * scale);
            jac.row_mut(ms.quadratic_index(t, r)).copy_from(&g.transpose());
        }
    }
    Ok((value, jac))
}

/// `d mbar / d theta` at `theta`.
pub fn moment_jacobian(theta: &ParamVector, data: &ModelData, ms: &MomentSet) -> Result<DMatrix<f64>> {
    Ok(moments_and_jacobian(theta, data, ms)?.1)
}

/// Block-diagonal moment variance `V~ = diag_t(H_t'H_t / n, 2 V_t^a)` and its (pseudo-)inverse.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub v: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub pseudo: bool,
}

/// Moment variance for scaled residuals. The scaling by `varrho_i` is already
/// inside `u*`, so the result depends only on the instruments and weights.
pub fn weight_matrix(ms: &MomentSet, allow_pseudo: bool) -> Result<WeightMatrix> {
    let n = ms.n() as f64;
    let p = ms.len();
    let mut v = DMatrix::zeros(p, p);
    for (t, block) in ms.blocks().iter().enumerate() {
        let hh = block.h.tr_mul(&block.h) / n;
        let l0 = ms.linear_index(t, 0);
        v.view_mut((l0, l0), (hh.nrows(), hh.ncols())).copy_from(&hh);
        for (r, ar) in block.a.iter().enumerate() {
            for (s, as_) in block.a.iter().enumerate().skip(r) {
                let val = 2.0 * ar.frobenius_dot(as_) / n;
                let (i, j) = (ms.quadratic_index(t, r), ms.quadratic_index(t, s));
                v[(i, j)] = val;
                v[(j, i)] = val;
            }
        }
    }
    let SymInverse { inverse, pseudo, eigen_ratio } = sym_inverse(&v, WEIGHT_EIGEN_FLOOR, allow_pseudo)?;
    if pseudo {
        log::warn!("moment variance is near singular (eigenvalue ratio {eigen_ratio:e}); using pseudo-inverse");
    }
    Ok(WeightMatrix { v, xi: inverse, pseudo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Regressor;

    fn two_unit_panel(y: [[f64; 2]; 2]) -> PanelData {
        let m = Arc::new(SpatialWeightMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap());
        let ydm = DMatrix::from_row_slice(2, 2, &[y[0][0], y[0][1], y[1][0], y[1][1]]);
        let z = vec![DMatrix::from_element(2, 1, 1.0); 2];
        let x = vec![DMatrix::zeros(2, 0); 2];
        PanelData::new(ydm, x, z, vec![vec![m.clone(), m]], vec![]).unwrap()
    }

    #[test]
    fn two_unit_hand_calculation() {
        // no regressors: u_s = y_s, u+_i = (y_i1 - y_i2)/sqrt 2
        let panel = two_unit_panel([[3.0, 1.0], [0.5, 2.0]]);
        let spec = ModelSpec {
            design: DesignSpec { spatial_lags: 0, regressors: vec![] },
            error_lags: 0,
            estimate_factor: false,
        };
        let data = ModelData::new(&panel, &spec).unwrap();
        let a = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let ms = MomentSet::new(vec![MomentBlock {
            h: DMatrix::from_element(2, 1, 1.0),
            a: vec![Arc::new(a)],
        }])
        .unwrap();
        let theta = ParamVector::new(vec![], vec![], vec![], 2, 2);
        let m = evaluate_moments(&theta, &data, &ms).unwrap().m;
        let s2 = 2f64.sqrt();
        let u1 = (3.0 - 1.0) / s2;
        let u2 = (0.5 - 2.0) / s2;
        assert!((m[0] - (u1 + u2) / s2).abs() < 1e-14);
        assert!((m[1] - 2.0 * u1 * u2 / s2).abs() < 1e-14);
    }

    #[test]
    fn quadratic_weight_examples() {
        let m = SpatialWeightMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap();
        let out = build_quadratic_weights(&m, &[QuadKind::Sym, QuadKind::Gram]).unwrap();
        assert_eq!(out[0].to_dense(), DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));
        assert_eq!(out[1].nnz(), 0);
        let sym = SpatialWeightMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 0.0])).unwrap();
        let out = build_quadratic_weights(&sym, &[QuadKind::Sym]).unwrap();
        assert_eq!(out[0], *sym.entries());
    }

    #[test]
    fn unit_instrument_weight_is_one() {
        let ms = MomentSet::new(vec![MomentBlock {
            h: DMatrix::from_element(5, 1, 1.0),
            a: vec![],
        }])
        .unwrap();
        let w = weight_matrix(&ms, true).unwrap();
        assert!((w.v[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((w.xi[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_instruments_take_pseudo_inverse_path() {
        let h = DMatrix::from_fn(6, 2, |i, _| i as f64 + 1.0);
        let ms = MomentSet::new(vec![MomentBlock { h, a: vec![] }]).unwrap();
        assert!(weight_matrix(&ms, true).unwrap().pseudo);
        assert!(matches!(weight_matrix(&ms, false), Err(Error::SingularWeightMatrix { .. })));
    }

    #[test]
    fn rejects_nonzero_diagonal_weight() {
        let a = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0])).unwrap();
        let err = MomentSet::new(vec![MomentBlock {
            h: DMatrix::from_element(2, 1, 1.0),
            a: vec![Arc::new(a)],
        }]);
        assert!(matches!(err, Err(Error::NonZeroDiagonal { .. })));
    }

    #[test]
    fn instrument_order_zero_and_pruning() {
        // M = blockdiag of 2x2 swaps: M^2 = I, so M^2 z duplicates z
        let n = 6;
        let mut d = DMatrix::zeros(n, n);
        for g in 0..3 {
            d[(2 * g, 2 * g + 1)] = 1.0;
            d[(2 * g + 1, 2 * g)] = 1.0;
        }
        let m = Arc::new(SpatialWeightMatrix::from_dense(&d).unwrap());
        let z: Vec<DMatrix<f64>> = (0..2)
            .map(|t| DMatrix::from_fn(n, 1, |i, _| ((i * 3 + t * 5) as f64).sin()))
            .collect();
        let panel = PanelData::new(
            DMatrix::zeros(n, 2),
            vec![DMatrix::zeros(n, 0); 2],
            z,
            vec![vec![m.clone(), m]],
            vec![],
        )
        .unwrap();
        let tr = helmert_weights(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let mut spec = InstrumentSpec {
            variables: vec![Variable::Z(0)],
            max_order: 0,
            source: InstrumentSource::Transformed,
            weight: 0,
        };
        assert_eq!(build_instruments(&panel, &spec, &tr, 1).unwrap()[0].ncols(), 1);
        spec.max_order = 2;
        assert_eq!(build_instruments(&panel, &spec, &tr, 1).unwrap()[0].ncols(), 2);
        assert!(matches!(
            build_instruments(&panel, &spec, &tr, 3),
            Err(Error::RankDeficientInstruments { available: 2, required: 3 })
        ));
    }

    #[test]
    fn theta_roundtrip() {
        let spec = ModelSpec {
            design: DesignSpec {
                spatial_lags: 1,
                regressors: vec![Regressor::own(Variable::Z(0))],
            },
            error_lags: 1,
            estimate_factor: true,
        };
        let mut p = ParamVector::new(vec![0.2], vec![1.5], vec![0.3], 3, 4);
        p.f = vec![0.7, 1.2, 1.0];
        let v = spec.theta_vec(&p);
        assert_eq!(v.as_slice(), &[0.2, 1.5, 0.3, 0.7, 1.2]);
        assert_eq!(spec.apply_theta(&p, v.as_slice()), p);
        assert_eq!(spec.n_theta(3), 5);
    }
}
