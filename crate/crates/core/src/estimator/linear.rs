//! Linear comparators and the 2SLS profile used by the starting-value search.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{solve_spd, sym_inverse};
use crate::moments::{ModelData, MomentSet};
use crate::panel::ParamVector;

/// Largest condition number accepted for `Z+' P_H Z+`.
pub const MAX_PROJECTION_CONDITION: f64 = 1e12;

/// Per-period instrument cross products `H'H`, `H'X`, `H'y` used to apply
/// `P_H` without forming it.
struct Projected {
    xpx: DMatrix<f64>,
    xpy: DVector<f64>,
}

fn projected_moments(h: &[DMatrix<f64>], x: &[DMatrix<f64>], y: &[DVector<f64>]) -> Result<Projected> {
    let k = x[0].ncols();
    let mut xpx = DMatrix::zeros(k, k);
    let mut xpy = DVector::zeros(k);
    for ((h_t, x_t), y_t) in h.iter().zip(x).zip(y) {
        if h_t.ncols() == 0 {
            continue;
        }
        let hh = sym_inverse(&h_t.tr_mul(h_t), 1e-12, true)?;
        if hh.pseudo {
            log::warn!("instrument cross product is singular; using pseudo-inverse");
        }
        let hx = h_t.tr_mul(x_t);
        let hy = h_t.tr_mul(y_t);
        let hx_w = &hh.inverse * &hx;
        xpx += hx.tr_mul(&hx_w);
        xpy += hx_w.tr_mul(&hy);
    }
    Ok(Projected { xpx, xpy })
}

/// 2SLS of stacked `y` on `x` with block-diagonal instruments `h`.
fn iv_fit(h: &[DMatrix<f64>], x: &[DMatrix<f64>], y: &[DVector<f64>]) -> Result<DVector<f64>> {
    let p = projected_moments(h, x, y)?;
    let sol = solve_spd(&p.xpx, &DMatrix::from_column_slice(p.xpy.len(), 1, p.xpy.as_slice()), MAX_PROJECTION_CONDITION)
        .map_err(|_| Error::SingularNormalEquations)?;
    Ok(sol.column(0).into_owned())
}

/// OLS of the forward-differenced, scaled outcome on the transformed regressors `W+`
/// with `(rho, f, gamma)` taken from `template`.
pub fn ols_estimate(data: &ModelData, template: &ParamVector) -> Result<DVector<f64>> {
    let (ys, ws) = data.transformed_system(template)?;
    let k = data.spec().n_delta();
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for (y, w) in ys.iter().zip(&ws) {
        xtx += w.tr_mul(w);
        xty += w.tr_mul(y);
    }
    let sol = solve_spd(&xtx, &DMatrix::from_column_slice(k, 1, xty.as_slice()), MAX_PROJECTION_CONDITION)
        .map_err(|_| Error::SingularNormalEquations)?;
    Ok(sol.column(0).into_owned())
}

/// 2SLS of the transformed outcome on `W+` using the instruments of `ms`.
pub fn tsls_estimate(data: &ModelData, ms: &MomentSet, template: &ParamVector) -> Result<DVector<f64>> {
    let (ys, ws) = data.transformed_system(template)?;
    check_dim("moment set periods", ys.len(), ms.periods())?;
    let h: Vec<DMatrix<f64>> = ms.blocks().iter().map(|b| b.h.clone()).collect();
    iv_fit(&h, &ws, &ys)
}

/// Concentrated 2SLS fit for a single spatial lag: `beta(lambda) = b0 - lambda b1`
/// and `u+(lambda) = c0 - lambda c1`, both affine in `lambda`.
#[derive(Debug, Clone)]
pub struct BetaProfile {
    pub b0: DVector<f64>,
    pub b1: DVector<f64>,
    c0: Vec<DVector<f64>>,
    c1: Vec<DVector<f64>>,
}

impl BetaProfile {
    pub fn beta(&self, lambda: f64) -> DVector<f64> {
        &self.b0 - &self.b1 * lambda
    }

    /// Profiled residuals per transformed period.
    pub fn residuals(&self, lambda: f64) -> Vec<DVector<f64>> {
        self.c0.iter().zip(&self.c1).map(|(a, b)| a - b * lambda).collect()
    }
}

/// Partials out `Z beta` with the linear moments: `beta(lambda)` is the 2SLS
/// coefficient of `(I - lambda M) y+` on `Z+` with instruments `H`. Requires a
/// single spatial lag.
pub fn partial_out_beta(data: &ModelData, ms: &MomentSet, template: &ParamVector) -> Result<BetaProfile> {
    let spec = data.spec();
    if spec.design.spatial_lags != 1 {
        return Err(Error::InvalidInput(format!(
            "profiling needs exactly one spatial lag, got {}",
            spec.design.spatial_lags
        )));
    }
    let (ys, ws) = data.transformed_system(template)?;
    check_dim("moment set periods", ys.len(), ms.periods())?;
    let h: Vec<DMatrix<f64>> = ms.blocks().iter().map(|b| b.h.clone()).collect();
    let k = spec.n_delta() - 1;
    let zs: Vec<DMatrix<f64>> = ws.iter().map(|w| w.columns(1, k).into_owned()).collect();
    let my: Vec<DVector<f64>> = ws.iter().map(|w| w.column(0).into_owned()).collect();
    let p = projected_moments(&h, &zs, &ys)?;
    let cond_rhs = {
        let q = projected_moments(&h, &zs, &my)?;
        q.xpy
    };
    let mut rhs = DMatrix::zeros(k, 2);
    rhs.set_column(0, &p.xpy);
    rhs.set_column(1, &cond_rhs);
    let sol = solve_spd(&p.xpx, &rhs, MAX_PROJECTION_CONDITION)?;
    let b0 = sol.column(0).into_owned();
    let b1 = sol.column(1).into_owned();
    let c0 = ys.iter().zip(&zs).map(|(y, z)| y - z * &b0).collect();
    let c1 = my.iter().zip(&zs).map(|(m, z)| m - z * &b1).collect();
    Ok(BetaProfile { b0, b1, c0, c1 })
}
