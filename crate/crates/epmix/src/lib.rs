//! Expectation propagation for Bayesian mixed-effects regression with one
//! grouping factor.
//!
//! The posterior over `theta = (u_1..u_L, gamma, beta)` and the random-effect
//! covariance `Sigma` is approximated by a product of Gaussian sites in
//! information form (for `theta`) and inverse-Wishart sites (for `Sigma`).
//! The global Gaussian keeps its precision matrix in block-sparse form, so a
//! single site refinement costs O(1) in the number of groups; a dense
//! reference engine with identical update mathematics serves as the
//! correctness oracle and as the non-scalable baseline.
//!
//! Modules, bottom-up:
//! - [`expfam`]: Gaussian information/moment forms, inverse-Wishart algebra,
//!   the per-observation dimension-reduction map.
//! - [`quadrature`]: normalized Gauss-Hermite rules and tilted-moment
//!   integration in one and two dimensions.
//! - [`likelihoods`]: log-kernels for the zero-inflated Poisson and
//!   binomial-probit observation models, plus stable `log Phi` machinery.
//! - [`model`]: datasets, priors, simulation, CSV round-trips, the parameter
//!   layout.
//! - [`sparse`]: the block-sparse global Gaussian with O(1) marginals,
//!   deltas with rollback, structured Cholesky sampling.
//! - [`engine`]: site stores, the sequential and parallel EP schedules, the
//!   moment-propagation step for `Sigma`, convergence bookkeeping.
//! - [`reference`]: dense (non-sparse) EP, Monte Carlo moment oracles, and a
//!   random-walk Metropolis sampler for ground truth.
//! - [`distributed`]: the synchronous central/worker runtime over TCP with
//!   length-prefixed JSON frames.
//! - [`diagnostics`]: deviation statistics between approximations and a
//!   reference, and an unbiased MMD^2 estimate.
//! - [`cli`]: the command implementations behind the thin binary.

pub mod cli;
pub mod diagnostics;
pub mod distributed;
pub mod engine;
mod error;
pub mod expfam;
mod jsonio;
pub mod likelihoods;
pub mod model;
pub mod quadrature;
pub mod reference;
pub mod sparse;

pub use error::{Error, Result};
