//! Mean-field variational Bayes laboratory.
//!
//! Three generative models (a unit-variance Gaussian mixture, a Poisson
//! mixed model with random intercepts and a stochastic block model) share
//! one toolkit:
//!
//! * [`models`] simulates data and evaluates exact joint / marginal
//!   likelihoods used as oracles,
//! * [`meanfield`] fits the mean-field variational posterior by coordinate
//!   ascent on the ELBO,
//! * [`vfe`] evaluates the variational log likelihood and runs variational
//!   EM for the frequentist point estimate,
//! * [`gaussian_kl`] and [`vb_ideal`] cover the Gaussian projection and
//!   grid-based ideal posterior objects,
//! * [`asymptotics`] turns replicated fits into rate, normality and
//!   dispersion verdicts,
//! * [`sampler`] is a Metropolis-within-Gibbs reference posterior.

pub mod asymptotics;
pub mod error;
pub mod gaussian_kl;
pub mod meanfield;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod sampler;
pub mod vb_ideal;
pub mod vfe;

pub use error::{Error, Result};
pub use models::{Dataset, ModelInstance};
