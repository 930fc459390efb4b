//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations,
//! plus the nuclear norm and its gradient.

use super::matrix::{dot, Matrix};
use super::NumError;

/// Sweeps stop once every column pair has `|cos angle| <= OFF_DIAGONAL_TOL`.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;
/// Smallest singular value accepted by [`nuclear_norm_grad`].
pub const RANK_TOL: f64 = 1e-10;

/// `a = u · diag(singular_values) · vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                let x = us.get(i, j) * s;
                us.set(i, j, x);
            }
        }
        us.matmul_t(&self.v).expect("svd factors have chained shapes")
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult, NumError> {
    if !a.is_finite() {
        return Err(NumError::NonFinite("svd input"));
    }
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(cosine);
                if cosine <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if off <= OFF_DIAGONAL_TOL {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps original column order among equal values
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let null_tol = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > null_tol && s > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / s).collect());
            singular_values.push(s);
        } else {
            u_cols.push(vec![0.0; m]);
            singular_values.push(0.0);
            missing.push(slot);
        }
        v_cols.push(v[j].clone());
    }
    complete_orthonormal(&mut u_cols, &missing, m);

    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| v_cols[j][i]);
    SvdResult {
        u,
        singular_values,
        v,
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (wp, wq) = (&mut head[p], &mut tail[0]);
    for (x, y) in wp.iter_mut().zip(wq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column,
/// drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < m, "ran out of basis vectors completing u");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Matrix) -> Result<f64, NumError> {
    Ok(svd(a)?.singular_values.iter().sum())
}

/// Gradient of the nuclear norm, `U · Vᵀ` from the thin SVD.
///
/// Undefined where the matrix loses rank, so any singular value at or below
/// [`RANK_TOL`] is reported as [`NumError::RankDeficient`] instead of silently
/// picking a subgradient.
pub fn nuclear_norm_grad(a: &Matrix) -> Result<Matrix, NumError> {
    nuclear_norm_grad_from(&svd(a)?)
}

/// [`nuclear_norm_grad`] from an already computed decomposition.
pub fn nuclear_norm_grad_from(d: &SvdResult) -> Result<Matrix, NumError> {
    let sigma_min = d.singular_values.last().copied().unwrap_or(0.0);
    if sigma_min <= RANK_TOL {
        return Err(NumError::RankDeficient {
            sigma_min,
            tol: RANK_TOL,
        });
    }
    d.u.matmul_t(&d.v)
}
