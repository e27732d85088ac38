use std::cmp::Ordering;

use crate::error::{dim_err, Error, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Numerically stable softmax of each row (max subtracted before `exp`).
pub fn row_softmax<T: Scalar>(logits: &Matrix<T>) -> Result<Matrix<T>> {
    if logits.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// [`row_softmax`] plus each row's entropy in nats, computed as
/// `ln Z - Σ α (s - max)` so no per-entry logarithm is needed.
pub fn row_softmax_entropy<T: Scalar>(logits: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    if logits.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let mut out = logits.clone();
    let mut entropy = Vec::with_capacity(out.rows());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        let mut weighted = T::zero();
        for x in row.iter_mut() {
            let s = *x - max;
            *x = s.exp();
            sum += *x;
            weighted += *x * s;
        }
        let inv = sum.recip();
        for x in row.iter_mut() {
            *x *= inv;
        }
        entropy.push((sum.ln() - weighted * inv).max(T::zero()));
    }
    Ok((out, entropy))
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Indices of the `k` largest scores, ascending. Ties go to the lower index.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < scores.len() {
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// Nearest-neighbour resize of a row-major `src_w x src_h` field.
///
/// Destination cell `x` samples source column
/// `ceil((x + 0.5) * src_w / dst_w - 1)` (the centre mapping rounded half
/// down), clamped to the grid; rows likewise.
pub fn nn_resize<T: Scalar>(
    src: &[T],
    (src_w, src_h): (usize, usize),
    (dst_w, dst_h): (usize, usize),
) -> Result<Vec<T>> {
    if src_w == 0 || src_h == 0 || dst_w == 0 || dst_h == 0 {
        return Err(dim_err!(
            "zero-sized grid {src_w}x{src_h} -> {dst_w}x{dst_h}"
        ));
    }
    if src.len() != src_w * src_h {
        return Err(dim_err!(
            "field of length {} on a {src_w}x{src_h} grid",
            src.len()
        ));
    }
    if (src_w, src_h) == (dst_w, dst_h) {
        return Ok(src.to_vec());
    }
    let xs: Vec<usize> = (0..dst_w).map(|x| nn_index(x, src_w, dst_w)).collect();
    let ys: Vec<usize> = (0..dst_h).map(|y| nn_index(y, src_h, dst_h)).collect();
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for &sy in &ys {
        for &sx in &xs {
            out.push(src[sy * src_w + sx]);
        }
    }
    Ok(out)
}

fn nn_index(dst: usize, src_n: usize, dst_n: usize) -> usize {
    let centre = (dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5;
    // round half down
    let i = (centre - 0.5).ceil();
    i.clamp(0.0, (src_n - 1) as f64) as usize
}
