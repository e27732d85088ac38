//! Dense numeric kernel: matrices, softmax, thin SVD, top-k, resize.
//!
//! Everything here is pure and generic over [`Scalar`](crate::Scalar).

mod matrix;
mod ops;
mod svd;

pub use matrix::{matmul, Matrix};
pub use ops::{nn_resize, row_softmax, row_softmax_entropy, top_k_indices};
pub use svd::{thin_svd, SvdResult, DEFAULT_SVD_TOL};
