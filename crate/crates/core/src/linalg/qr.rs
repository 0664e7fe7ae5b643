//! Householder orthonormalization.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Orthonormal basis `Q` (`rows × min(rows, cols)`) with `m = Q R`.
///
/// Householder reflectors are applied column by column; a column that is already
/// zero below the diagonal leaves its reflector as the identity, so rank-deficient
/// input still yields orthonormal columns (a deterministic completion). Columns are
/// signed so that the diagonal of `R` is nonnegative.
pub fn householder_q(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    // Work column-major.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    let mut r_diag = Vec::with_capacity(k);

    for j in 0..k {
        let x = &a[j][j..];
        let norm_x = dot(x, x).sqrt();
        if norm_x == 0.0 {
            reflectors.push(None);
            r_diag.push(0.0);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm_x } else { norm_x };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            r_diag.push(x[0]);
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= vnorm;
        }
        for col in a.iter_mut().skip(j) {
            apply_reflector(&v, &mut col[j..]);
        }
        r_diag.push(a[j][j]);
        reflectors.push(Some(v));
    }

    // Q = H_0 H_1 … H_{k-1} [I_k; 0]
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            for col in q.iter_mut() {
                apply_reflector(v, &mut col[j..]);
            }
        }
    }
    for (j, col) in q.iter_mut().enumerate() {
        if r_diag[j] < 0.0 {
            for x in col.iter_mut() {
                *x = -*x;
            }
        }
    }

    let mut out = Matrix::zeros(rows, k);
    for (j, col) in q.iter().enumerate() {
        out.set_column(j, col);
    }
    out
}

#[inline]
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let s = 2.0 * dot(v, x);
    if s != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= s * vi;
        }
    }
}

/// Orthonormal `Q` with `m.cols` columns whose span contains the column span of `m`.
pub fn orthonormalize(m: &Matrix) -> Result<Matrix> {
    if m.rows() < m.cols() {
        return Err(Error::shape(
            "orthonormalize",
            format!("need rows >= cols, got {}x{}", m.rows(), m.cols()),
        ));
    }
    m.ensure_finite("orthonormalize input")?;
    Ok(householder_q(m))
}
