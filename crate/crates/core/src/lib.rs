//! Preliminary test estimation (PTE) in locally asymptotically normal models.
//!
//! The crate is organised bottom-up:
//!
//! * [`statfn`]: central and noncentral chi-square distribution functions and
//!   the `γ_j` acceptance probabilities that drive every risk formula.
//! * [`matstat`]: projections, symmetric square roots, pseudo-inverses and the
//!   structural matrices (`K_k`, `J_k`, `M_k(V)`, `H_k(V)`, `vech°`) of the
//!   multisample covariance model.
//! * [`pte`]: the generic machinery: estimator combination, conditional limit
//!   moments, exact asymptotic mean-square-error (AMSE) matrices and the
//!   limit-law sampler.
//! * [`linreg`]: the simple linear regression instance.
//! * [`multicov`]: the multisample Gaussian covariance model under scale,
//!   shape and covariance homogeneity constraints.
//! * [`montecarlo`]: the replication engine comparing empirical and analytic
//!   risk curves.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linreg;
pub mod matstat;
pub mod montecarlo;
pub mod multicov;
pub mod pte;
pub mod statfn;

pub use error::{PteError, Result};
