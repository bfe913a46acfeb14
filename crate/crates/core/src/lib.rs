//! Numerical laboratory for the population EM dynamics of truncated balanced
//! mixtures of two symmetric Gaussians.
//!
//! The observed model is `f_mu(x) = 0.5 N(x; -mu, Sigma) + 0.5 N(x; mu, Sigma)`
//! restricted by a truncation set or `[0,1]`-valued truncation function `S`;
//! only the mean parameter is estimated, the covariance is known. Because the
//! truncation destroys the closed form of the M-step, each EM iteration is an
//! implicit nonlinear solve. This crate provides:
//!
//! * [`model`]: mixture parameters, truncation specifications, densities and
//!   the whitening transform,
//! * [`quad`]: controlled-accuracy truncated-mixture expectations,
//! * [`em`]: the implicit EM update and full EM runs,
//! * [`analysis`]: moment derivatives, the EM-map Jacobian and fixed-point
//!   stability classification,
//! * [`landscape`]: fixed-point enumeration, vector fields and basin
//!   sampling,
//! * [`rates`]: empirical contraction rates, bracketing and FKG-type
//!   correlation checks.

pub mod analysis;
pub mod em;
mod error;
pub mod landscape;
pub mod model;
pub(crate) mod moments;
pub mod quad;
pub mod rates;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
