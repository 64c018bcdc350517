//! Mixture of `K` unit-variance univariate Gaussians with uniform weights.

use crate::error::{Error, Result};
use crate::numeric::special::{log_sum_exp, normal_logpdf, LN_2PI};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

fn default_prior_sd() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    /// Observation count.
    #[serde(default)]
    pub n: usize,
    /// Prior sd of each component mean (prior is `N(0, sd²)`).
    #[serde(default = "default_prior_sd")]
    pub prior_mean_sd: f64,
}

impl GmmModel {
    pub fn new(k: usize, n: usize) -> Self {
        GmmModel {
            k,
            n,
            prior_mean_sd: default_prior_sd(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("gmm needs K >= 1".into()));
        }
        if !(self.prior_mean_sd > 0.0 && self.prior_mean_sd.is_finite()) {
            return Err(Error::InvalidArgument("gmm prior sd must be positive".into()));
        }
        Ok(())
    }

    /// Labels first (`c_i` uniform), then `x_i = μ_{c_i} + ε_i`, datum by datum.
    pub(crate) fn simulate(&self, mu: &[f64], rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(self.n);
        let mut c = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let ci = rng.random_range(0..self.k);
            let eps: f64 = StandardNormal.sample(rng);
            c.push(ci);
            x.push(mu[ci] + eps);
        }
        (x, c)
    }

    pub(crate) fn complete_loglik(&self, mu: &[f64], c: &[usize], x: &[f64]) -> Result<f64> {
        if c.len() != x.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} observations",
                c.len(),
                x.len()
            )));
        }
        let log_w = -(self.k as f64).ln();
        let mut s = 0.0;
        for (&ci, &xi) in c.iter().zip(x) {
            if ci >= self.k {
                return Err(Error::Dimension(format!("label {ci} out of range K={}", self.k)));
            }
            s += log_w + normal_logpdf(xi, mu[ci], 1.0);
        }
        Ok(s)
    }

    pub(crate) fn profile(&self, mu: &[f64], x: &[f64]) -> Vec<usize> {
        x.iter()
            .map(|&xi| {
                let mut best = 0;
                let mut best_d = (xi - mu[0]).abs();
                for (k, &m) in mu.iter().enumerate().skip(1) {
                    let d = (xi - m).abs();
                    if d < best_d {
                        best = k;
                        best_d = d;
                    }
                }
                best
            })
            .collect()
    }
}

/// Per-datum variational log likelihood `m(μ; x) = log Σ_k (1/K) N(x; μ_k, 1)`.
///
/// The optimal local factor is the exact conditional of `c`, so this is also
/// the exact per-datum mixture log likelihood.
pub fn datum_loglik(mu: &[f64], x: f64) -> f64 {
    let k = mu.len() as f64;
    let terms: Vec<f64> = mu.iter().map(|&m| -0.5 * (x - m) * (x - m)).collect();
    log_sum_exp(&terms) - k.ln() - 0.5 * LN_2PI
}

/// `Σ_i log[(1/K) Σ_k N(x_i; μ_k, 1)]`.
pub fn mixture_loglik(mu: &[f64], x: &[f64]) -> f64 {
    x.iter().map(|&xi| datum_loglik(mu, xi)).sum()
}

/// Posterior responsibilities `p(c_i = k | x_i, μ)`.
pub fn exact_responsibilities(mu: &[f64], x: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (o, &m) in out.iter_mut().zip(mu) {
        *o = -0.5 * (x - m) * (x - m);
        max = max.max(*o);
    }
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}
