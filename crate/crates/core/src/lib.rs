//! Maximum entropy flow networks.
//!
//! A maximum entropy distribution under moment constraints `E[T(Z)] = 0` is
//! found by pushing a standard normal through a trainable normalizing flow and
//! maximizing the flow's entropy with a stochastic augmented Lagrangian. The
//! flow gives exact log-densities (through accumulated log-Jacobians), so the
//! entropy has an unbiased Monte Carlo estimate, and samples are i.i.d.
//!
//! Modules:
//!
//! - [`flow`]: planar and radial layers, output maps onto constrained supports,
//!   exact log-densities and analytic parameter gradients.
//! - [`constraints`]: moment functions with output-space Jacobians (Dirichlet
//!   log-moments, call option prices).
//! - [`objectives`]: Monte Carlo estimators of entropy, moment residuals and the
//!   split-batch augmented Lagrangian gradient.
//! - [`trainer`]: the two-level training loop with multiplier updates and
//!   randomized penalty escalation.
//! - [`oracles`]: special functions, closed-form Dirichlet quantities and the
//!   piecewise-exponential Gibbs risk-neutral density.
//! - [`validation`]: MMD two-sample testing, Q-Q pairs and diversity metrics.
//! - [`experiment`]: config-driven experiment runners used by the `mefn` CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod constraints;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod objectives;
pub mod oracles;
pub mod trainer;
pub mod validation;

mod vecops;

pub use error::{Error, Result};
