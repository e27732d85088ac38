//! Thin singular value decomposition by one-sided (Hestenes) Jacobi.
//!
//! Columns of the working copy are rotated pairwise until every pair is
//! orthogonal to within `tol` (relative to the product of their norms). The
//! column norms are then the singular values and the accumulated rotations are
//! the right singular vectors. Wide inputs are decomposed through their
//! transpose.
//!
//! Output contract:
//! - `sigma` non-increasing and non-negative, length `min(rows, cols)`;
//! - `u` columns and `vt` rows orthonormal, including directions with zero
//!   singular value (completed against the standard basis);
//! - in each column of `u` the entry of largest magnitude is non-negative,
//!   ties resolved by the lowest row index, with `vt` flipped to match.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Default pairwise orthogonality tolerance for `f64` inputs.
pub const DEFAULT_SVD_TOL: f64 = 1e-15;

const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult<T = f64> {
    /// `rows x m` left singular vectors.
    pub u: Matrix<T>,
    /// Non-increasing singular values, length `m = min(rows, cols)`.
    pub sigma: Vec<T>,
    /// `m x cols` right singular vectors (as rows).
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank_count(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vt`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, &s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factor shapes agree")
    }
}

pub fn thin_svd<T: Scalar>(x: &Matrix<T>, tol: T) -> Result<SvdResult<T>> {
    if x.is_empty() {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !(tol > T::zero()) {
        return Err(Error::InvalidParameter(format!("svd tolerance {tol} <= 0")));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("svd of non-finite matrix".into()));
    }
    if x.rows() >= x.cols() {
        tall_svd(x, tol)
    } else {
        // X = (Xᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let t = tall_svd(&x.transpose(), tol)?;
        let mut out = SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// `rows >= cols`.
fn tall_svd<T: Scalar>(x: &Matrix<T>, tol: T) -> Result<SvdResult<T>> {
    let (m, n) = x.shape();
    // Column-major working copies.
    let mut a: Vec<Vec<T>> = (0..n).map(|c| x.column(c)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { T::one() } else { T::zero() }).collect())
        .collect();

    let threshold = tol.max(T::epsilon() * T::from_usize_lossy(m));
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (ap, aq) = (&a[p], &a[q]);
                    let mut al = T::zero();
                    let mut be = T::zero();
                    let mut ga = T::zero();
                    for i in 0..m {
                        al += ap[i] * ap[i];
                        be += aq[i] * aq[i];
                        ga += ap[i] * aq[i];
                    }
                    (al, be, ga)
                };
                if gamma == T::zero() || gamma.abs() <= threshold * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = (T::one() + t * t).sqrt().recip();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::InvalidInput(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<T> = a
        .iter()
        .map(|col| col.iter().map(|&z| z * z).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let smax = norms[order[0]];
    let null_tol = smax * T::epsilon() * T::from_usize_lossy(m.max(n));
    let mut ucols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut vrows: Vec<Vec<T>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        let col = if s > null_tol && s > T::zero() {
            let inv = s.recip();
            a[j].iter().map(|&z| z * inv).collect()
        } else {
            vec![T::zero(); m]
        };
        ucols.push(col);
        sigma.push(s);
        vrows.push(v[j].clone());
    }
    orthonormalize(&mut ucols);

    let mut u = Matrix::zeros(m, n);
    for (c, col) in ucols.iter().enumerate() {
        for (r, &val) in col.iter().enumerate() {
            u.set(r, c, val);
        }
    }
    let vt = Matrix::from_raw(n, n, vrows.concat());
    let mut out = SvdResult { u, sigma, vt };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let (vp, vq) = (*xp, *xq);
        *xp = c * vp - s * vq;
        *xq = s * vp + c * vq;
    }
}

/// Modified Gram-Schmidt in column order, with two passes per column. Zero
/// columns (null directions) are replaced by the standard basis vector with
/// the largest residual against the columns before them.
fn orthonormalize<T: Scalar>(cols: &mut [Vec<T>]) {
    let m = cols.first().map_or(0, Vec::len);
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        let is_null = col.iter().all(|&x| x == T::zero());
        if is_null {
            let mut best: Option<(T, Vec<T>)> = None;
            for e in 0..m {
                let mut cand = vec![T::zero(); m];
                cand[e] = T::one();
                project_out(&mut cand, done);
                project_out(&mut cand, done);
                let n = norm(&cand);
                if best.as_ref().map_or(true, |(bn, _)| n > *bn) {
                    best = Some((n, cand));
                }
            }
            *col = best.expect("m > 0").1;
        } else {
            project_out(col, done);
            project_out(col, done);
        }
        let n = norm(col);
        let inv = n.recip();
        for x in col.iter_mut() {
            *x *= inv;
        }
    }
}

fn project_out<T: Scalar>(col: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let d: T = b.iter().zip(col.iter()).map(|(&x, &y)| x * y).sum();
        for (x, &y) in col.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn fix_signs<T: Scalar>(svd: &mut SvdResult<T>) {
    let (rows, m) = svd.u.shape();
    for c in 0..m {
        let mut best = 0;
        let mut best_abs = T::neg_infinity();
        for r in 0..rows {
            let a = svd.u.get(r, c).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if svd.u.get(best, c) < T::zero() {
            for r in 0..rows {
                svd.u.set(r, c, -svd.u.get(r, c));
            }
            for x in svd.vt.row_mut(c) {
                *x = -*x;
            }
        }
    }
}
