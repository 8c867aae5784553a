//! Box-constrained BFGS with projected Armijo backtracking.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Convergence: projected-gradient infinity norm below this value.
    pub grad_tol: f64,
    /// Iteration stops (without claiming convergence) when a step is shorter than this.
    pub step_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            grad_tol: 1e-8,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub projected_gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Coordinate bounds; use infinities for free coordinates.
pub type Bounds = Vec<(f64, f64)>;

fn project(x: &mut DVector<f64>, bounds: &Bounds) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Indices pinned at a bound with the gradient pointing outward.
fn active_set(x: &DVector<f64>, g: &DVector<f64>, bounds: &Bounds) -> Vec<bool> {
    x.iter()
        .zip(g.iter())
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0))
        .collect()
}

fn projected_norm(g: &DVector<f64>, active: &[bool]) -> f64 {
    g.iter()
        .zip(active)
        .filter(|(_, &a)| !a)
        .fold(0.0f64, |m, (v, _)| m.max(v.abs()))
}

/// Minimizes `f` from `x0` within `bounds`. `f` returns the value and gradient;
/// an `Err` or non-finite value at a trial point is treated as an infinitely
/// bad point and the line search backs off. `h0` seeds the inverse Hessian.
pub fn minimize<F>(mut f: F, x0: &DVector<f64>, bounds: &Bounds, h0: Option<DMatrix<f64>>, opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let dim = x0.len();
    let mut x = x0.clone();
    project(&mut x, bounds);
    let (mut value, mut grad) = f(&x)?;
    let h_init = h0.filter(|h| h.iter().all(|v| v.is_finite())).unwrap_or_else(|| DMatrix::identity(dim, dim));
    let mut h = h_init.clone();
    let mut iterations = 0;
    let mut converged = false;
    let mut fresh = true;
    loop {
        let active = active_set(&x, &grad, bounds);
        let pg = projected_norm(&grad, &active);
        if pg < opts.grad_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        let mut hr = h.clone();
        for (i, &a) in active.iter().enumerate() {
            if a {
                hr.row_mut(i).fill(0.0);
                hr.column_mut(i).fill(0.0);
            }
        }
        let mut d = -(&hr * &grad);
        if d.dot(&grad) >= 0.0 {
            h = h_init.clone();
            d = grad.map(|v| -v);
            for (i, &a) in active.iter().enumerate() {
                if a {
                    d[i] = 0.0;
                }
            }
            fresh = true;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = &x + &d * alpha;
            project(&mut trial, bounds);
            let step = &trial - &x;
            if step.amax() == 0.0 {
                break;
            }
            if let Ok((fv, gv)) = f(&trial) {
                if fv.is_finite() && fv <= value + 1e-4 * grad.dot(&step) {
                    accepted = Some((trial, fv, gv));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if !fresh {
                h = h_init.clone();
                fresh = true;
                continue;
            }
            break;
        };
        let s = &x_new - &x;
        let yv = &g_new - &grad;
        let sy = s.dot(&yv);
        let step_norm = s.amax();
        x = x_new;
        value = f_new;
        grad = g_new;
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += &s * s.transpose() * (rho * rho * yhy + rho);
            fresh = false;
        }
        if step_norm < opts.step_tol {
            let active = active_set(&x, &grad, bounds);
            converged = projected_norm(&grad, &active) < opts.grad_tol;
            break;
        }
    }
    let active = active_set(&x, &grad, bounds);
    Ok(OptimResult {
        projected_gradient_norm: projected_norm(&grad, &active),
        x,
        value,
        gradient: grad,
        iterations,
        converged,
    })
}
