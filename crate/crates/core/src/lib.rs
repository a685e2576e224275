//! Relaxed belief propagation for linear mixing estimation.
//!
//! Estimates a random vector `x` observed as `y ~ p(y|z)`, `z = Phi x`, where
//! the prior on `x` and the measurement channel are both separable. Messages
//! carry only means and variances; the output-node likelihoods are linearized
//! through the derivatives of the Gaussian-smoothed log likelihood.
//!
//! The crate is organized around four subsystems:
//!
//! - [`scalar_io`]: scalar posterior moments (`F_in`, `E_in`) for pluggable
//!   priors and score derivatives (`D1`, `D2`) for pluggable channels.
//! - [`message_passing`]: the per-edge algorithm and the cheaper per-vertex
//!   variant, plus the genie (true-`x`) initialization.
//! - [`state_evolution`]: the scalar recursion predicting the asymptotic
//!   error variances, with hi/lo branches and fixed-point extraction.
//! - [`sim_harness`]: reproducible Monte Carlo experiments, baselines
//!   (linear MMSE, consistent-set projection), and report files.

pub mod mat;
pub mod message_passing;
pub mod scalar_io;
pub mod sim_harness;
pub mod state_evolution;
