//! Spherical-harmonics algebra: real orthonormal basis evaluation,
//! projection/reconstruction, zonal rotation, the sparse triple-product
//! tensor, SH products, and the log/exp pair used for fast visibility
//! accumulation.
//!
//! Conventions: real SH without the Condon-Shortley phase, orthonormal
//! (`integral of y_i * y_j over the sphere = delta_ij`), flat index
//! `i = l^2 + l + m` with bands `l = 0..n-1`.

mod basis;
mod exp;
mod product;
mod triple;
mod vector;
mod zonal;

pub use basis::{eval_basis, eval_basis_grad, Y00};
pub use exp::{exp_table, sh_exp, sh_exp_vjp, ExpTable, SavedExp};
pub use product::{sh_product, sh_product_into};
pub use triple::{triple_product_tensor, TensorEntry, TripleProductTensor};
pub use vector::{project, project_weighted, reconstruct, sh_dot, SHVector, ZonalVector};
pub use zonal::{
    rotate_zonal, rotate_zonal_into, rotate_zonal_vjp, zonal_clamped_cosine, zonal_log_blocker,
    zonal_log_blocker_grad, LogBlockerGrad, THETA_MAX_DEG,
};

use thiserror::Error;

/// Largest band count the precompute paths accept.
pub const MAX_BANDS: usize = 12;

#[derive(Debug, Error)]
pub enum ShError {
    #[error("band count mismatch: {0} vs {1}")]
    BandMismatch(usize, usize),
    #[error("empty sample set")]
    EmptySamples,
    #[error("band count {0} outside supported range 1..={MAX_BANDS}")]
    BandRange(usize),
    #[error("tensor cache: {0}")]
    CacheIo(#[from] std::io::Error),
}
