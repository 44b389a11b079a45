//! Numerical laboratory for vector and multi-species mean-field spin glasses.
//!
//! The crate represents matrix-valued order-parameter paths, decomposes them
//! into a Lipschitz matrix path composed with a quantile function, solves the
//! associated Parisi PDE by a recursive Gaussian construction, and estimates
//! the same quantities independently with Ruelle-cascade Monte Carlo. On top
//! of that it simulates the characteristic diffusion to read off the
//! derivative of the free-energy functional, locates critical points of the
//! Hamilton-Jacobi functional, and classifies the replica-symmetry-breaking
//! structure of the resulting paths.
//!
//! The crate is `no_std`-compatible (with `alloc`); all file formats and IO
//! live in the companion `parisi-lab` crate. The `parallel` feature enables
//! rayon-backed parallel loops with deterministic, worker-count-independent
//! reductions.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cascade;
pub mod characteristics;
pub mod error;
pub mod multispecies;
mod num;
pub mod par;
pub mod paths;
pub mod pde;
pub mod psd;
pub mod quad;
pub mod rng;
pub mod rsb;
pub mod spin;

pub use error::{CoreError, Result};
pub use psd::SymMat;

/// Tolerance for membership checks on the positive semidefinite cone.
pub const PSD_TOL: f64 = 1e-10;

/// Merge tolerance for coincident breakpoints and equal path values.
pub const MERGE_TOL: f64 = 1e-12;
