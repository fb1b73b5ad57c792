//! Arbitrary polynomial chaos surrogates fitted from function values and
//! gradients.
//!
//! The crate is organised bottom-up:
//!
//! - [`apc_basis`]: moment-based orthonormal polynomial bases.
//! - [`doe`]: coherence-weighted, QR-pivoted selection of evaluation points.
//! - [`regression`]: weighted least squares on values, optionally stacked
//!   with gradient rows.
//! - [`analysis`]: statistics read off a fitted expansion.
//! - [`models`]: benchmark functions and input distributions.
//! - [`topopt`]: a SIMP compliance-minimization solver used as an
//!   uncertain, gradient-equipped model.

pub mod analysis;
pub mod apc_basis;
pub mod doe;
pub mod linalg;
pub mod models;
pub mod regression;
pub mod topopt;

pub use apc_basis::{
    build_multiindex, compute_moments, compute_norms, eval_basis, eval_basis_derivatives,
    eval_basis_gradients, hankel_cholesky, BasisError, MomentSet, MultiIndex, MultivariateBasis,
    UnivariateBasis,
};
