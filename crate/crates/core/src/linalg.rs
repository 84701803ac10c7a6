//! Dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Singular values below `PINV_RTOL * sigma_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

/// Matrix norm used where a formula writes `||M||` on a matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    #[default]
    Spectral,
    Frobenius,
}

impl MatrixNorm {
    pub fn eval(self, m: &DMatrix<f64>) -> f64 {
        match self {
            MatrixNorm::Spectral => spectral_norm(m),
            MatrixNorm::Frobenius => m.norm(),
        }
    }
}

fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

/// Largest singular value; zero for an empty matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().cloned().fold(0.0, f64::max)
}

/// Numerical rank with tolerance `max(rows, cols) * sigma_max * 1e-12`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * smax * 1e-12;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Moore-Penrose pseudoinverse via SVD with relative cutoff [`PINV_RTOL`].
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if m.is_empty() {
        return DMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * PINV_RTOL;
    let mut out = DMatrix::zeros(cols, rows);
    for (i, &s) in sv.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            // out += v_i * u_i^T / s
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out.ger(1.0 / s, &vi, &ui, 1.0);
        }
    }
    out
}

/// Minimum-Frobenius-norm least-squares solution `M = Y * Phi^+` of
/// `M * Phi ~ Y`. No rank check is performed.
pub fn min_norm_solve(y: &DMatrix<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    y * pinv(phi)
}

/// Inverse of a symmetric positive definite matrix, falling back to LU when
/// Cholesky fails. Returns `None` for singular input.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.is_empty() {
        return Some(DMatrix::zeros(0, 0));
    }
    let inv = match m.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => m.clone().try_inverse()?,
    };
    if inv.iter().all(|v| v.is_finite()) {
        Some(symmetrize(&inv))
    } else {
        None
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `||M * M_inv - I||_F`.
pub fn inverse_residual(m: &DMatrix<f64>, m_inv: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    (m * m_inv - DMatrix::<f64>::identity(n, n)).norm()
}

/// Stacks `top` over `bottom`; both must have the same column count.
pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(top.ncols(), bottom.ncols(), "vstack column mismatch");
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Places `left` and `right` side by side; both must have the same row count.
pub fn hstack(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(left.nrows(), right.nrows(), "hstack row mismatch");
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.columns_mut(0, left.ncols()).copy_from(left);
    out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    out
}

pub fn matrix_power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::identity(n, n);
    for _ in 0..k {
        out = &out * a;
    }
    out
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
