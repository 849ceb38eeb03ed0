//! Steady-state model of ROP1 membrane polarity and its inverse problem.
//!
//! The steady state of the integro-differential polarity model is a scaled
//! copy `lambda * sigma0(mu * x)` of the ground state `sigma0` of
//! `-u'' = -u + u^alpha`. This crate solves for `sigma0`, works out which
//! `(k_nf, k_pf)` admit a steady state, and fits `(mu, lambda)` (and hence
//! `(k_nf, k_pf)`) from intensity data:
//!
//! - [`estimators::cnls_fit`]: constrained least squares for one tube,
//! - [`estimators::cmm_fit`]: two-stage method of moments for many tubes,
//! - [`estimators::creml_fit`]: linearized mixed model fitted by REML with BLUP updates.
//!
//! [`simulation`] holds the seeded generators and the Monte Carlo harness,
//! [`pipeline`] the CSV ingestion and preprocessing for measured data.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over small matrices read more clearly than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod elliptic;
pub mod error;
pub mod estimators;
pub mod numerics;
pub mod pipeline;
pub mod simulation;
pub mod steady_state;

pub use elliptic::{closed_form_ground_state, solve_ground_state, GroundState};
pub use error::{Error, Result};
pub use numerics::{Mat2, SymMat2};
pub use steady_state::{Branch, ModelConstants, ModelParams, NaturalParams, Profile};
