//! Dense linear algebra and the numerical kernels the rest of the crate leans on.
//!
//! Everything here is a pure function over immutable inputs.

mod kmeans;
mod matrix;
mod svd;

use thiserror::Error;

pub use kmeans::{kmeans, nearest, KMeansModel, MAX_ITERATIONS};
pub use matrix::{dot, matmul, squared_distance, Matrix};
pub use svd::{nuclear_norm, nuclear_norm_grad, nuclear_norm_grad_from, svd, SvdResult, MAX_SWEEPS, OFF_DIAGONAL_TOL, RANK_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("rank deficient: smallest singular value {sigma_min:e} <= {tol:e}")]
    RankDeficient { sigma_min: f64, tol: f64 },
    #[error("k-means needs at least {clusters} points, got {points}")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("k-means needs at least one cluster")]
    ZeroClusters,
}
