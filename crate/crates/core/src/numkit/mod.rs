//! Dense linear algebra and random-number primitives.
//!
//! Everything here is double precision and deterministic: the same inputs
//! (and the same seeds) produce the same outputs on every run and build.
//! All operations are pure functions over value inputs; [`Rng`] is the one
//! mutable object and is meant to be owned by a single logical stream.

mod matrix;
mod rng;
mod svd;

pub use matrix::{cosine_similarity, cosine_similarity_flagged, Matrix};
pub use rng::{derive_seed, digest64, Rng, RNG_ALGORITHM};
pub use svd::{orthonormal_rowspace_basis, rank_threshold, Svd};

use thiserror::Error;

/// Largest dimension the SVD accepts on its smaller side.
pub const SVD_DIM_LIMIT: usize = 512;

/// Errors from the numeric primitives.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {left} vs {right} in {op}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },
    #[error("SVD limited to min dimension {SVD_DIM_LIMIT}, got {0}")]
    TooLarge(usize),
    #[error("SVD did not converge after {sweeps} sweeps (max off-diagonal cosine {residual:.3e})")]
    NoConvergence { sweeps: usize, residual: f64 },
}
