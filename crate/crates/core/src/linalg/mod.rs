//! Dense matrices, SVD, and the Frobenius-metric projections used for
//! gradient-subspace selection.

mod matrix;
mod subspace;
mod svd;

pub use matrix::Matrix;
pub use subspace::{
    check_orthonormal, explained_variance, frobenius_inner, orthonormality_error, perp_project,
    select_rank, subspace_project, truncate, RankSelection, ORTHONORMAL_TOL,
};
pub use svd::{svd, zero_threshold, SvdFactors, MAX_SWEEPS};
