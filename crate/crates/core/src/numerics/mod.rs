//! Small dense linear algebra: products, 2x2 spectra, one-sided Jacobi SVD
//! and PCA. Everything is `f64`.

mod matrix;
mod spectral;

pub use matrix::{l2_norm, Matrix};
pub(crate) use matrix::{axpy, dot, matmul_nt_into};
pub use spectral::{eig2x2, pca, singular_values, spectral_norm, svd_jacobi, JacobiSvd, Pca, Spectrum2};
