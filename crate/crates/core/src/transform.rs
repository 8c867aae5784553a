//! Generalized Helmert forward differencing and spatial Cochrane-Orcutt filtering.
//!
//! A forward-differencing matrix `Pi` with `Pi f = 0` removes the interactive
//! effect `mu f_t` from a panel, and `Pi Sigma_sigma Pi' = I` keeps the
//! transformed idiosyncratic errors uncorrelated over time. Row `t` only
//! involves periods `s >= t`, so instruments dated `t` remain valid.
//!
//! Rows carry the sign of the constructive formula, `(u_t - weighted future
//! mean)`. Flipping the sign of a row flips the linear moments and leaves
//! quadratic forms untouched.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::panel::SpatialWeightMatrix;

/// Tail sums `phi_t` at or below this value make the transform undefined.
pub const DEGENERACY_TOL: f64 = 1e-14;

/// Forward-differencing matrix together with the factors and variances used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmertTransform {
    pi: DMatrix<f64>,
    factors: DMatrix<f64>,
    sigma: Vec<f64>,
}

impl HelmertTransform {
    /// The `(T - P) x T` matrix.
    pub fn pi(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.factors
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn periods(&self) -> usize {
        self.pi.ncols()
    }

    pub fn rows(&self) -> usize {
        self.pi.nrows()
    }

    /// `||Pi F||_inf`.
    pub fn annihilation_error(&self) -> f64 {
        (&self.pi * &self.factors).abs().max()
    }

    /// `||Pi Sigma Pi' - I||_inf`.
    pub fn orthonormality_error(&self) -> f64 {
        let sig = DMatrix::from_diagonal(&DVector::from_column_slice(&self.sigma));
        let g = &self.pi * sig * self.pi.transpose();
        (g - DMatrix::identity(self.rows(), self.rows())).abs().max()
    }
}

fn validate_sigma(periods: usize, sigma: &[f64]) -> Result<()> {
    check_dim("sigma length", periods, sigma.len())?;
    if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidInput("sigma_t^2 must be positive and finite".into()));
    }
    Ok(())
}

/// Closed-form generalized Helmert rows for a single factor. `sigma` holds
/// variances; `phi_t = sum_{tau >= t} f_tau^2 / sigma_tau^2`.
fn helmert_rows(f: &[f64], sigma: &[f64], check: bool) -> Result<DMatrix<f64>> {
    let t_len = f.len();
    let mut phi = vec![0.0; t_len + 1];
    for t in (0..t_len).rev() {
        phi[t] = f[t] * f[t] / sigma[t] + phi[t + 1];
    }
    if check {
        for (t, &p) in phi.iter().enumerate().take(t_len).skip(1) {
            if p <= DEGENERACY_TOL {
                return Err(Error::DegenerateFactor { period: t + 1, phi: p });
            }
        }
    }
    let mut pi = DMatrix::zeros(t_len - 1, t_len);
    for t in 0..t_len - 1 {
        let sd = sigma[t].sqrt();
        let ratio = (phi[t + 1] / phi[t]).sqrt();
        pi[(t, t)] = ratio / sd;
        for s in t + 1..t_len {
            pi[(t, s)] = -f[t] * f[s] * ratio / (phi[t + 1] * sd * sigma[s]);
        }
    }
    Ok(pi)
}

/// Generalized Helmert transform for factor `f` and variances `sigma` (`sigma_t^2 > 0`).
pub fn helmert_weights(f: &[f64], sigma: &[f64]) -> Result<HelmertTransform> {
    let t_len = f.len();
    if t_len < 2 {
        return Err(Error::TooManyFactors {
            factors: 1,
            periods: t_len,
        });
    }
    validate_sigma(t_len, sigma)?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("factor"));
    }
    let pi = helmert_rows(f, sigma, true)?;
    Ok(HelmertTransform {
        pi,
        factors: DMatrix::from_column_slice(t_len, 1, f),
        sigma: sigma.to_vec(),
    })
}

/// Orthonormal-row annihilator of `g` for recursion stages after the first.
/// Entries past the last non-negligible element of `g` get unit rows, so the
/// result stays upper triangular even when the projected factor has a zero tail.
fn orthonormal_annihilator(g: &DVector<f64>, period: usize) -> Result<DMatrix<f64>> {
    let m = g.len();
    let scale = g.amax();
    if scale <= DEGENERACY_TOL {
        return Err(Error::DegenerateFactor {
            period,
            phi: g.norm_squared(),
        });
    }
    let gs: Vec<f64> = g.iter().map(|v| v / scale).collect();
    let last = (0..m)
        .rev()
        .find(|&k| gs[k].abs() > DEGENERACY_TOL)
        .expect("non-zero vector has a non-zero entry");
    let mut out = DMatrix::zeros(m - 1, m);
    if last > 0 {
        let head = helmert_rows(&gs[..=last], &vec![1.0; last + 1], false)?;
        out.view_mut((0, 0), (last, last + 1)).copy_from(&head);
    }
    for (row, col) in (last..m - 1).zip(last + 1..m) {
        out[(row, col)] = 1.0;
    }
    Ok(out)
}

/// Recursive generalized Helmert transform for `P` factors (columns of `factors`).
/// The first stage absorbs `Sigma_sigma`; later stages are orthonormal.
pub fn multi_factor_weights(factors: &DMatrix<f64>, sigma: &[f64]) -> Result<HelmertTransform> {
    let (t_len, p) = factors.shape();
    if p == 0 {
        return Err(Error::InvalidInput("at least one factor is required".into()));
    }
    if p >= t_len {
        return Err(Error::TooManyFactors {
            factors: p,
            periods: t_len,
        });
    }
    validate_sigma(t_len, sigma)?;
    let first: Vec<f64> = factors.column(0).iter().copied().collect();
    let mut pi = helmert_weights(&first, sigma)?.pi;
    for stage in 1..p {
        let g = &pi * factors.column(stage);
        let step = orthonormal_annihilator(&g, stage + 1)?;
        pi = step * pi;
    }
    Ok(HelmertTransform {
        pi,
        factors: factors.clone(),
        sigma: sigma.to_vec(),
    })
}

/// Central finite-difference derivative of the single-factor `Pi` with respect
/// to `f_k`, relative step `rel_step`.
pub fn helmert_derivative(f: &[f64], sigma: &[f64], k: usize, rel_step: f64) -> Result<DMatrix<f64>> {
    let h = rel_step * f[k].abs().max(1.0);
    let mut up = f.to_vec();
    let mut down = f.to_vec();
    up[k] += h;
    down[k] -= h;
    let p_up = helmert_weights(&up, sigma)?;
    let p_down = helmert_weights(&down, sigma)?;
    Ok((p_up.pi - p_down.pi) / (2.0 * h))
}

/// `(I - sum_q rho_q M_q) v`.
pub fn cochrane_orcutt(
    rho: &[f64],
    weights: &[&SpatialWeightMatrix],
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("rho length", weights.len(), rho.len())?;
    let mut out = v.clone();
    for (&r, m) in rho.iter().zip(weights) {
        check_dim("Cochrane-Orcutt vector", m.dim(), v.len())?;
        if r != 0.0 {
            out -= m.mul_vec(v) * r;
        }
    }
    Ok(out)
}

/// Column `t` of the result is `residuals * pi_t'` (`u_it^+ = sum_s pi_ts u_is`).
pub fn forward_difference(transform: &HelmertTransform, residuals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("residual periods", transform.periods(), residuals.ncols())?;
    Ok(residuals * transform.pi().transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;
    use proptest::prelude::*;

    #[test]
    fn classical_helmert_special_case() {
        for t_len in 2..=6 {
            let h = helmert_weights(&vec![1.0; t_len], &vec![1.0; t_len]).unwrap();
            for t in 0..t_len - 1 {
                let rem = (t_len - t - 1) as f64;
                let diag = (rem / (rem + 1.0)).sqrt();
                assert!((h.pi()[(t, t)] - diag).abs() < 1e-15);
                for s in t + 1..t_len {
                    assert!((h.pi()[(t, s)] + diag / rem).abs() < 1e-15);
                }
                for s in 0..t {
                    assert_eq!(h.pi()[(t, s)], 0.0);
                }
            }
        }
    }

    #[test]
    fn two_period_unit_factor() {
        let h = helmert_weights(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((h.pi()[(0, 0)] - r).abs() < 1e-15);
        assert!((h.pi()[(0, 1)] + r).abs() < 1e-15);
    }

    #[test]
    fn two_period_nonunit_factor() {
        // phi_2 = 1, phi_1 = 5
        let h = helmert_weights(&[2.0, 1.0], &[1.0, 1.0]).unwrap();
        let s5 = 5f64.sqrt();
        assert!((h.pi()[(0, 0)] - 1.0 / s5).abs() < 1e-15);
        assert!((h.pi()[(0, 1)] + 2.0 / s5).abs() < 1e-15);
        assert!(h.annihilation_error() < 1e-12);
        assert!(h.orthonormality_error() < 1e-12);
    }

    #[test]
    fn degenerate_tail_is_rejected() {
        let err = helmert_weights(&[1.0, 0.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateFactor { .. }));
    }

    #[test]
    fn multi_factor_single_is_base_case() {
        let f = [0.5, -1.2, 2.0, 1.0];
        let s = [1.5, 0.7, 2.0, 1.0];
        let one = helmert_weights(&f, &s).unwrap();
        let multi = multi_factor_weights(&DMatrix::from_column_slice(4, 1, &f), &s).unwrap();
        assert_eq!(one.pi(), multi.pi());
    }

    #[test]
    fn multi_factor_with_zero_tail_projection() {
        let f = DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let h = multi_factor_weights(&f, &[1.0; 3]).unwrap();
        assert_eq!(h.rows(), 1);
        assert!(h.annihilation_error() < 1e-12);
        assert!(h.orthonormality_error() < 1e-12);
    }

    #[test]
    fn too_many_factors() {
        let f = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            multi_factor_weights(&f, &[1.0, 1.0]),
            Err(Error::TooManyFactors { .. })
        ));
    }

    #[test]
    fn cochrane_orcutt_cases() {
        let m = SpatialWeightMatrix::new(
            CsrMatrix::from_triplets(3, &[(0, 1, 0.5), (0, 2, 0.5), (1, 0, 1.0), (2, 0, 1.0)]).unwrap(),
        )
        .unwrap();
        let ones = DVector::from_element(3, 1.0);
        assert_eq!(cochrane_orcutt(&[0.0], &[&m], &ones).unwrap(), ones);
        let half = cochrane_orcutt(&[0.5], &[&m], &ones).unwrap();
        assert!((half - DVector::from_element(3, 0.5)).amax() < 1e-15);
        assert!(cochrane_orcutt(&[0.5, 0.1], &[&m], &ones).is_err());
    }

    #[test]
    fn forward_difference_two_periods() {
        let h = helmert_weights(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, -1.0, 2.0]);
        let out = forward_difference(&h, &r).unwrap();
        let s2 = 2f64.sqrt();
        assert!((out[(0, 0)] - 2.0 / s2).abs() < 1e-15);
        assert!((out[(1, 0)] + 3.0 / s2).abs() < 1e-15);
        let constant = DMatrix::from_element(4, 2, 7.0);
        assert!(forward_difference(&h, &constant).unwrap().amax() < 1e-14);
    }

    proptest! {
        #[test]
        fn random_two_factor_invariants(
            f1 in proptest::collection::vec(-2.0f64..2.0, 3),
            f2 in proptest::collection::vec(-2.0f64..2.0, 4),
            s in proptest::collection::vec(0.2f64..3.0, 3),
        ) {
            let mut fm = DMatrix::zeros(4, 2);
            for t in 0..3 { fm[(t, 0)] = f1[t]; }
            fm[(3, 0)] = 1.0;
            fm.set_column(1, &DVector::from_vec(f2));
            let mut sig = s.clone();
            sig.push(1.0);
            match multi_factor_weights(&fm, &sig) {
                Ok(h) => {
                    prop_assert_eq!(h.rows(), 2);
                    prop_assert!(h.annihilation_error() < 1e-12 * fm.amax().max(1.0));
                    prop_assert!(h.orthonormality_error() < 1e-12);
                }
                Err(Error::DegenerateFactor { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn cochrane_orcutt_linear(
            v in proptest::collection::vec(-3.0f64..3.0, 4),
            w in proptest::collection::vec(-3.0f64..3.0, 4),
            r1 in -1.0f64..1.0, r2 in -1.0f64..1.0,
        ) {
            let m = SpatialWeightMatrix::new(CsrMatrix::from_triplets(4, &[
                (0, 1, 0.3), (0, 3, 0.7), (1, 2, 1.0), (2, 0, 0.4), (2, 1, 0.6), (3, 2, 1.0),
            ]).unwrap()).unwrap();
            let v = DVector::from_vec(v);
            let w = DVector::from_vec(w);
            let direct = (DMatrix::identity(4, 4) - m.entries().to_dense() * r1) * &v;
            let got = cochrane_orcutt(&[r1], &[&m], &v).unwrap();
            prop_assert!((got.clone() - direct).amax() < 1e-12);
            let sum = cochrane_orcutt(&[r1], &[&m], &(&v + &w)).unwrap();
            let parts = got + cochrane_orcutt(&[r1], &[&m], &w).unwrap();
            prop_assert!((sum - parts).amax() < 1e-12);
            // affine in rho: R(r1 + r2) v = R(r1) v + R(r2) v - v
            let joint = cochrane_orcutt(&[r1 + r2], &[&m], &v).unwrap();
            let split = cochrane_orcutt(&[r1], &[&m], &v).unwrap()
                + cochrane_orcutt(&[r2], &[&m], &v).unwrap() - &v;
            prop_assert!((joint - split).amax() < 1e-12);
        }

        #[test]
        fn interactive_effects_are_removed(
            mu in proptest::collection::vec(-5.0f64..5.0, 6),
            f in proptest::collection::vec(-2.0f64..2.0, 4),
            s_true in proptest::collection::vec(0.2f64..3.0, 4),
            s_used in proptest::collection::vec(0.2f64..3.0, 4),
        ) {
            let mut f = f;
            f.push(1.0);
            let mut s = s_used;
            s.push(1.0);
            let h = helmert_weights(&f, &s).unwrap();
            let mu = DVector::from_vec(mu);
            let fe = &mu * DVector::from_vec(f.clone()).transpose();
            prop_assert!(forward_difference(&h, &fe).unwrap().amax() < 1e-12 * 5.0 * 2.0);
            let u = DMatrix::from_fn(6, 5, |i, t| ((i * 7 + t * 3) as f64).sin() * s_true[t.min(3)]);
            let with_fe = forward_difference(&h, &(&u + &fe)).unwrap();
            let without = forward_difference(&h, &u).unwrap();
            prop_assert!((with_fe - without).amax() < 1e-12 * 10.0);
        }
    }
}
