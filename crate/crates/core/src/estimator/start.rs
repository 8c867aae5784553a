//! Starting values from the roots of the profiled quadratic moments.

use nalgebra::DVector;

use super::linear::{partial_out_beta, BetaProfile};
use crate::error::{Error, Result};
use crate::linalg::sym_inverse;
use crate::moments::{ModelData, MomentSet};
use crate::panel::ParamVector;

/// Coefficients `(c0, c1, c2)` of `c0 + c1 x + c2 x^2` through the values at `x = -1, 0, 1`.
pub fn fit_quadratic(at_minus: f64, at_zero: f64, at_plus: f64) -> (f64, f64, f64) {
    (at_zero, 0.5 * (at_plus - at_minus), 0.5 * (at_plus + at_minus) - at_zero)
}

/// Real roots of `c0 + c1 x + c2 x^2`, ascending. A vanishing leading
/// coefficient (relative to the others) is treated as the linear case.
pub fn quadratic_roots(c0: f64, c1: f64, c2: f64) -> Vec<f64> {
    let scale = c0.abs().max(c1.abs()).max(c2.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if c2.abs() <= 1e-14 * scale {
        return if c1.abs() > 1e-14 * scale { vec![-c0 / c1] } else { Vec::new() };
    }
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc < 0.0 {
        return Vec::new();
    }
    // numerically stable pairing
    let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
    let mut roots = if q == 0.0 {
        vec![0.0, 0.0]
    } else {
        vec![q / c2, c0 / q]
    };
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots
}

/// A starting point `(lambda, beta(lambda))` with its quadratic criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct StartCandidate {
    pub lambda: f64,
    pub beta: DVector<f64>,
    pub criterion: f64,
    /// `(period, weight index)` whose root produced the candidate; `None` for grid points.
    pub source: Option<(usize, usize)>,
}

/// Number of points of the fallback grid on the lambda box.
pub const GRID_POINTS: usize = 41;

fn quadratic_values(ms: &MomentSet, u: &[DVector<f64>]) -> DVector<f64> {
    let scale = 1.0 / (ms.n() as f64).sqrt();
    let mut out = Vec::with_capacity(ms.n_quadratic());
    for (block, u_t) in ms.blocks().iter().zip(u) {
        for a in &block.a {
            out.push(a.quad_form(u_t) * scale);
        }
    }
    DVector::from_vec(out)
}

/// Profile root search for models with one spatial lag. Returns every real
/// root inside `bounds` with its criterion `mbar_q' (V^a)^{-1} mbar_q / n`,
/// sorted by criterion (ties by position), so the first entry is the selected
/// start. Falls back to the best point of a 41-point grid when no quadratic
/// moment has an admissible real root.
pub fn starting_values(
    data: &ModelData,
    ms: &MomentSet,
    template: &ParamVector,
    bounds: (f64, f64),
) -> Result<Vec<StartCandidate>> {
    if ms.n_quadratic() == 0 {
        return Err(Error::InvalidInput("starting values need quadratic moments".into()));
    }
    let profile = partial_out_beta(data, ms, template)?;
    starting_values_from_profile(&profile, ms, bounds)
}

pub fn starting_values_from_profile(
    profile: &BetaProfile,
    ms: &MomentSet,
    bounds: (f64, f64),
) -> Result<Vec<StartCandidate>> {
    let n = ms.n() as f64;
    // V^a per period, stacked block-diagonally
    let q = ms.n_quadratic();
    let mut va = nalgebra::DMatrix::zeros(q, q);
    let mut off = 0;
    for block in ms.blocks() {
        for (r, ar) in block.a.iter().enumerate() {
            for (s, as_) in block.a.iter().enumerate() {
                va[(off + r, off + s)] = ar.frobenius_dot(as_) / n;
            }
        }
        off += block.a.len();
    }
    let va_inv = sym_inverse(&va, 1e-10, true)?.inverse;
    let criterion = |lambda: f64| -> f64 {
        let m = quadratic_values(ms, &profile.residuals(lambda));
        m.dot(&(&va_inv * &m)) / n
    };
    let vals: Vec<DVector<f64>> = [-1.0, 0.0, 1.0]
        .iter()
        .map(|&l| quadratic_values(ms, &profile.residuals(l)))
        .collect();
    let mut candidates = Vec::new();
    let mut idx = 0;
    for (t, block) in ms.blocks().iter().enumerate() {
        for r in 0..block.a.len() {
            let (c0, c1, c2) = fit_quadratic(vals[0][idx], vals[1][idx], vals[2][idx]);
            for root in quadratic_roots(c0, c1, c2) {
                if root >= bounds.0 && root <= bounds.1 {
                    let c = criterion(root);
                    if c.is_finite() {
                        candidates.push(StartCandidate {
                            lambda: root,
                            beta: profile.beta(root),
                            criterion: c,
                            source: Some((t, r)),
                        });
                    }
                }
            }
            idx += 1;
        }
    }
    if candidates.is_empty() {
        log::debug!("no admissible real roots; using grid search for the starting value");
        let best = (0..GRID_POINTS)
            .map(|k| bounds.0 + (bounds.1 - bounds.0) * k as f64 / (GRID_POINTS - 1) as f64)
            .map(|l| (l, criterion(l)))
            .filter(|(_, c)| c.is_finite())
            .fold(None, |acc: Option<(f64, f64)>, (l, c)| match acc {
                Some((_, bc)) if bc <= c => acc,
                _ => Some((l, c)),
            });
        let (lambda, c) = best.ok_or(Error::NoStartingValue)?;
        candidates.push(StartCandidate {
            lambda,
            beta: profile.beta(lambda),
            criterion: c,
            source: None,
        });
    }
    // stable sort keeps discovery order among ties
    candidates.sort_by(|a, b| a.criterion.partial_cmp(&b.criterion).unwrap());
    Ok(candidates)
}
