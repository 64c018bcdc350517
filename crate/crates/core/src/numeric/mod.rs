//! Small numerical building blocks shared by the estimators.

pub mod optim;
pub mod quadrature;
pub mod special;
pub mod stats;

pub use special::{ln_factorial, log_sum_exp, sigmoid, softplus};
