//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Inverse of a symmetric positive semidefinite matrix.
#[derive(Debug, Clone)]
pub struct SymInverse {
    pub inverse: DMatrix<f64>,
    /// True when the eigenvalue floor triggered and a pseudo-inverse was returned.
    pub pseudo: bool,
    /// Smallest over largest eigenvalue (0 when the matrix is zero).
    pub eigen_ratio: f64,
}

/// Inverts a symmetric matrix by eigendecomposition. Eigenvalues below
/// `rel_floor * max_eigenvalue` are treated as zero (pseudo-inverse) when
/// `allow_pseudo` is set; otherwise the call fails.
pub fn sym_inverse(m: &DMatrix<f64>, rel_floor: f64, allow_pseudo: bool) -> Result<SymInverse> {
    let k = m.nrows();
    if k == 0 {
        return Ok(SymInverse {
            inverse: DMatrix::zeros(0, 0),
            pseudo: false,
            eigen_ratio: 1.0,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric matrix"));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    let floor = rel_floor * max;
    let pseudo = max == 0.0 || min < floor;
    if pseudo && !allow_pseudo {
        return Err(Error::SingularWeightMatrix { ratio });
    }
    let mut inv = DMatrix::zeros(k, k);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if max == 0.0 || lambda <= floor {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        inv += (v * v.transpose()) / lambda;
    }
    Ok(SymInverse {
        inverse: inv,
        pseudo,
        eigen_ratio: ratio,
    })
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Smallest singular value measured against full *column* rank: a wide matrix
/// (fewer rows than columns) cannot have full column rank and reports 0.
pub fn min_singular_value_columns(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Solves `a x = b` for symmetric positive definite `a`, failing when the
/// condition number exceeds `max_condition`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, max_condition: f64) -> Result<DMatrix<f64>> {
    let cond = condition_number(a);
    if !cond.is_finite() || cond > max_condition {
        return Err(Error::SingularProjection { condition: cond });
    }
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => a
            .clone()
            .lu()
            .solve(b)
            .ok_or(Error::SingularProjection { condition: cond }),
    }
}

/// Indices of a maximal set of linearly independent columns, chosen greedily in
/// column order by modified Gram-Schmidt (two passes). A column is kept when its
/// residual norm exceeds `rel_tol` times its own norm.
pub fn independent_columns(m: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for c in 0..m.ncols() {
        let col = m.column(c).into_owned();
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        let mut r = col / norm;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r -= q * proj;
            }
        }
        let rn = r.norm();
        if rn > rel_tol {
            basis.push(r / rn);
            keep.push(c);
        }
    }
    keep
}

/// Columns of `m` selected by `idx`.
pub fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

/// Horizontal concatenation of column blocks with equal row count.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

/// Vertical concatenation of row blocks with equal column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r0, 0), (b.nrows(), cols)).copy_from(*b);
        r0 += b.nrows();
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_inverse_on_duplicate_columns() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let g = h.transpose() * &h;
        let inv = sym_inverse(&g, 1e-10, true).unwrap();
        assert!(inv.pseudo);
        // Moore-Penrose: G G+ G = G
        let back = &g * &inv.inverse * &g;
        assert!((back - g.clone()).abs().max() < 1e-10);
        assert!(matches!(
            sym_inverse(&g, 1e-10, false),
            Err(Error::SingularWeightMatrix { .. })
        ));
    }

    #[test]
    fn independent_columns_drops_combinations() {
        let m = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0, 1.0, 1.0, 5.0, 2.0, 0.0, 4.0],
        );
        assert_eq!(independent_columns(&m, 1e-10), vec![0, 1]);
    }

    #[test]
    fn wide_matrix_has_zero_column_rank_measure() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(min_singular_value_columns(&m), 0.0);
    }
}
