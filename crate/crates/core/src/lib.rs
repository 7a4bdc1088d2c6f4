//! A small laboratory for SGD under the expected-smoothness (ES) condition
//!
//! ```text
//! E‖∇f_v(x)‖² ≤ 2A(f(x) − f⋆) + B‖∇f(x)‖² + C
//! ```
//!
//! The crate is organised bottom-up:
//!
//! - [`problems`]: finite-sum test objectives with certified smoothness constants and infima.
//! - [`sampling`]: the three sampling-vector schemes, their exact moments, closed-form
//!   ES constants and a brute-force enumeration oracle.
//! - [`schedules`]: constant, harmonic, polynomial and cosine step sizes with exact partial sums.
//! - [`optimizer`]: seeded SGD / mini-batch SGD runs, second-moment probes and seed ensembles.
//! - [`es_model`]: nonnegative least-squares fitting of `(A, B, C)` and identity checks.
//! - [`bounds`]: the min-gradient convergence bound, rate predictions and rate fitting.
//! - [`cli`]: the config-driven experiment runner behind the `eslab` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod error;
pub mod es_model;
pub mod nnls;
pub mod optimizer;
pub mod problems;
pub mod sampling;
pub mod schedules;
pub mod stats;

pub use error::{Error, Result};

/// Dense column vector used for iterates and gradients.
pub type Vector = nalgebra::DVector<f64>;
