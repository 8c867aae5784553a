//! Finite-sample rank diagnostics for the linear and quadratic moment conditions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{min_singular_value_columns, singular_values, solve_spd, sym_inverse};
use crate::moments::{ModelData, MomentSet};
use crate::panel::ParamVector;

/// Largest condition number accepted for `Z' P_H Z`.
pub const MAX_PROJECTION_CONDITION: f64 = 1e12;

/// `P_H` and `Q_H = I - Z (Z' P_H Z)^{-1} Z' P_H`, applied without forming `n x n` matrices.
#[derive(Debug, Clone)]
pub struct Projectors {
    h: DMatrix<f64>,
    hth_inv: DMatrix<f64>,
    z: DMatrix<f64>,
    /// `(Z' P_H Z)^{-1}`
    zpz_inv: DMatrix<f64>,
}

pub fn compute_projectors(h: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<Projectors> {
    check_dim("projector rows", h.nrows(), z.nrows())?;
    let hth = h.tr_mul(h);
    let inv = sym_inverse(&hth, 1e-12, true)?;
    if inv.pseudo {
        log::warn!("H'H is singular (eigenvalue ratio {:e}); using a pseudo-inverse", inv.eigen_ratio);
    }
    let hz = h.tr_mul(z);
    let zpz = hz.tr_mul(&(&inv.inverse * &hz));
    let zpz_inv = solve_spd(&zpz, &DMatrix::identity(zpz.nrows(), zpz.nrows()), MAX_PROJECTION_CONDITION)?;
    Ok(Projectors {
        h: h.clone(),
        hth_inv: inv.inverse,
        z: z.clone(),
        zpz_inv,
    })
}

impl Projectors {
    pub fn p_h(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.h * (&self.hth_inv * self.h.tr_mul(v))
    }

    pub fn q_h(&self, v: &DVector<f64>) -> DVector<f64> {
        let pv = self.p_h(v);
        v - &self.z * (&self.zpz_inv * self.z.tr_mul(&pv))
    }

    pub fn q_h_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, col) in m.column_iter().enumerate() {
            out.set_column(j, &self.q_h(&col.into_owned()));
        }
        out
    }
}

/// `S_n` with rows `n^{-1} [ (Q My)' A_r (Q y), (Q My)' A_r (Q My) ]`, one per weight matrix.
pub fn compute_s(y: &DVector<f64>, my: &DVector<f64>, a: &[&crate::sparse::CsrMatrix], proj: &Projectors) -> Result<DMatrix<f64>> {
    let n = y.len();
    check_dim("spatial lag length", n, my.len())?;
    let qy = proj.q_h(y);
    let qmy = proj.q_h(my);
    let mut s = DMatrix::zeros(a.len(), 2);
    for (r, ar) in a.iter().enumerate() {
        check_dim("weight matrix size", n, ar.dim())?;
        s[(r, 0)] = ar.bilinear(&qmy, &qy) / n as f64;
        s[(r, 1)] = ar.quad_form(&qmy) / n as f64;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NotIdentified,
    QuadraticIdentified,
    LinearIdentified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Threshold on the linear rank diagnostics.
    pub linear: f64,
    /// Threshold on `sigma_min(S_n)`.
    pub quadratic: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            linear: 1e-4,
            quadratic: 1e-4,
        }
    }
}

pub fn verdict(sigma_min_hw: f64, sigma_min_hz: f64, sigma_min_s: f64, th: &Thresholds) -> Verdict {
    if sigma_min_hw > th.linear {
        Verdict::LinearIdentified
    } else if sigma_min_hz > th.linear && sigma_min_s > th.quadratic {
        Verdict::QuadraticIdentified
    } else {
        Verdict::NotIdentified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodDiagnostics {
    pub period: usize,
    /// Smallest singular value of `n^{-1} H' W+`.
    pub sigma_min_hw: f64,
    /// Smallest singular value of `n^{-1} H' Z+`.
    pub sigma_min_hz: f64,
    pub s_n: DMatrix<f64>,
    pub sigma_min_s: f64,
    pub det_sts: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    /// Best verdict over the transformed periods.
    pub verdict: Verdict,
    /// Period the verdict was taken from.
    pub best_period: usize,
    pub thresholds: Thresholds,
    pub periods: Vec<PeriodDiagnostics>,
}

impl IdentificationReport {
    pub fn best(&self) -> &PeriodDiagnostics {
        &self.periods[self.best_period]
    }
}

pub fn diagnose_period(
    period: usize,
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    a: &[&crate::sparse::CsrMatrix],
    th: &Thresholds,
) -> Result<PeriodDiagnostics> {
    let n = y.len() as f64;
    if w.ncols() < 2 {
        return Err(Error::InvalidInput("diagnostics need a spatial lag and at least one regressor".into()));
    }
    let my = w.column(0).into_owned();
    let z = w.columns(1, w.ncols() - 1).into_owned();
    let sigma_min_hw = min_singular_value_columns(&(h.tr_mul(w) / n));
    let sigma_min_hz = min_singular_value_columns(&(h.tr_mul(&z) / n));
    let (s_n, sigma_min_s, det_sts) = if a.is_empty() {
        (DMatrix::zeros(0, 2), 0.0, 0.0)
    } else {
        let s_n = match compute_projectors(h, &z) {
            Ok(proj) => compute_s(y, &my, a, &proj)?,
            Err(Error::SingularProjection { condition }) => {
                log::warn!("period {period}: Z' P_H Z is singular (condition {condition:e}); S_n set to zero");
                DMatrix::zeros(a.len(), 2)
            }
            Err(e) => return Err(e),
        };
        let sigma = if s_n.nrows() < 2 {
            0.0
        } else {
            singular_values(&s_n).last().copied().unwrap_or(0.0)
        };
        let det = s_n.tr_mul(&s_n).determinant();
        (s_n, sigma, det)
    };
    Ok(PeriodDiagnostics {
        period,
        sigma_min_hw,
        sigma_min_hz,
        verdict: verdict(sigma_min_hw, sigma_min_hz, sigma_min_s, th),
        s_n,
        sigma_min_s,
        det_sts,
    })
}

/// Rank diagnostics per transformed period at the `(rho, f, gamma)` of `params`.
/// The model must have exactly one spatial lag. For more than one transformed
/// period the overall verdict is the best period's, ties broken by the larger
/// linear diagnostic.
pub fn diagnose(data: &ModelData, ms: &MomentSet, params: &ParamVector, th: &Thresholds) -> Result<IdentificationReport> {
    if data.spec().design.spatial_lags != 1 {
        return Err(Error::InvalidInput("identification diagnostics need exactly one spatial lag".into()));
    }
    check_dim("moment periods", data.periods() - 1, ms.periods())?;
    let (ys, ws) = data.transformed_system(params)?;
    let mut periods = Vec::with_capacity(ms.periods());
    for (t, block) in ms.blocks().iter().enumerate() {
        let a: Vec<&crate::sparse::CsrMatrix> = block.a.iter().map(|m| m.as_ref()).collect();
        periods.push(diagnose_period(t, &ys[t], &ws[t], &block.h, &a, th)?);
    }
    let best_period = periods
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.verdict
                .cmp(&b.verdict)
                .then(a.sigma_min_hw.partial_cmp(&b.sigma_min_hw).unwrap_or(std::cmp::Ordering::Equal))
                .then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidInput("no transformed periods".into()))?;
    Ok(IdentificationReport {
        verdict: periods[best_period].verdict,
        best_period,
        thresholds: *th,
        periods,
    })
}
