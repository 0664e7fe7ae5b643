//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `m = P · diag(sigma) · Qᵀ` with `k = min(rows, cols)` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Left singular vectors, `rows × k`, orthonormal columns.
    pub p: Matrix,
    /// Singular values, nonincreasing.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `cols × k`, orthonormal columns.
    pub q: Matrix,
}

impl SvdResult {
    pub fn rank_at(&self, tol: f64) -> usize {
        self.sigma.iter().filter(|&&s| s > tol).count()
    }

    /// `P · diag(sigma) · Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut ps = self.p.clone();
        for j in 0..self.sigma.len() {
            for i in 0..ps.rows() {
                ps[(i, j)] *= self.sigma[j];
            }
        }
        ps.matmul_t(&self.q).expect("consistent svd factors")
    }

    /// σ_max / σ_min (infinite for singular input).
    pub fn condition_number(&self) -> f64 {
        match (self.sigma.first(), self.sigma.last()) {
            (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
            (Some(_), Some(_)) => f64::INFINITY,
            _ => 1.0,
        }
    }
}

/// Deterministic thin SVD.
///
/// Each left singular vector is signed so its largest-magnitude entry is positive
/// (first such entry on ties); the paired right vector flips with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    m.ensure_finite("svd input")?;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::shape("svd", "empty matrix"));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        // m = P Σ Qᵀ  <=>  mᵀ = Q Σ Pᵀ
        let t = jacobi_tall(&m.transpose())?;
        let mut out = SvdResult {
            p: t.q,
            sigma: t.sigma,
            q: t.p,
        };
        normalize_signs(&mut out);
        Ok(out)
    }
}

fn jacobi_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = a.iter().map(|c| dot(c, c)).collect();
    let tol = (rows as f64).sqrt() * f64::EPSILON;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                norms[p] = dot(&a[p], &a[p]);
                norms[q] = dot(&a[q], &a[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let sig: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // stable: ties keep column order
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]));

    let sigma_max = order.first().map_or(0.0, |&i| sig[i]);
    let null_floor = sigma_max * 1e-150;
    let mut p_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut q = Matrix::zeros(cols, cols);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = sig[j];
        sigma.push(s);
        q.set_column(k, &v[j]);
        if s > null_floor && s > 0.0 {
            p_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            p_cols.push(Vec::new());
            missing.push(k);
        }
    }
    complete_basis(&mut p_cols, &missing, rows);

    let mut p = Matrix::zeros(rows, cols);
    for (k, col) in p_cols.iter().enumerate() {
        p.set_column(k, col);
    }
    let mut out = SvdResult { p, sigma, q };
    normalize_signs(&mut out);
    Ok(out)
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let a = *xi;
        let b = *yi;
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Fills the slots listed in `missing` with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], n: usize) {
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.is_empty() {
                        continue;
                    }
                    let proj = dot(c, &cand);
                    for (x, ci) in cand.iter_mut().zip(c) {
                        *x -= proj * ci;
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| nrm > *b + 1e-12) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, mut cand) = best.expect("n > 0");
        for x in cand.iter_mut() {
            *x /= nrm;
        }
        cols[slot] = cand;
    }
}

fn normalize_signs(out: &mut SvdResult) {
    for j in 0..out.sigma.len() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..out.p.rows() {
            let x = out.p[(i, j)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..out.p.rows() {
                out.p[(i, j)] = -out.p[(i, j)];
            }
            for i in 0..out.q.rows() {
                out.q[(i, j)] = -out.q[(i, j)];
            }
        }
    }
}
