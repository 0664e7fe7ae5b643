//! Dense linear algebra: matrices, Householder orthonormalization, Jacobi SVD.

mod matrix;
mod qr;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use qr::{householder_q, orthonormalize};
pub use svd::{svd, SvdResult};
