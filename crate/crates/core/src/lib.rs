//! Posterior covariance estimation for Bayesian ODE parameter inference by
//! Laplace approximation around a posterior mode.
//!
//! The crate is organised bottom-up:
//!
//! * [`models`]: ODE right-hand sides with hand-coded Jacobians and Hessians,
//!   cubic B-spline bases, and a finite-difference oracle.
//! * [`flow`]: the RK4 transition map, its m-fold composition and exact
//!   first/second derivatives with respect to `u = (x, θ)`.
//! * [`sensitivity`]: forward sensitivity systems for the exact ODE solution
//!   plus reference integrators.
//! * [`posterior`]: negative log posteriors, gradients and Hessians for the
//!   relaxed state-space model and the original ODE model.
//! * [`laplace`]: inversion, Schur-complement marginalisation, nearest-PD
//!   repair, correlations, Gaussian sampling and credible bands.
//! * [`inference`]: MAP fitting, the adaptive Metropolis / delayed rejection
//!   oracle and covariance comparison metrics.

pub mod error;
pub mod flow;
pub mod inference;
pub mod laplace;
pub mod linalg;
pub mod models;
pub mod posterior;
pub mod sensitivity;

pub use error::{Error, Result};
