//! Poisson mixed model with group-specific random intercepts:
//! `U_i ~ N(0, σ²)`, `Y_ij | X_ij, U_i ~ Poi(exp(β_0 + β_1·X_ij + U_i))`.

use super::GlmmData;
use crate::error::{Error, Result};
use crate::numeric::special::{ln_factorial, normal_logpdf};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Distribution of one covariate coordinate; coordinates are independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    StandardNormal,
    Normal { sd: f64 },
    Bernoulli { p: f64 },
}

impl CovariateLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            CovariateLaw::StandardNormal => Ok(()),
            CovariateLaw::Normal { sd } if sd > 0.0 && sd.is_finite() => Ok(()),
            CovariateLaw::Bernoulli { p } if (0.0..=1.0).contains(&p) => Ok(()),
            other => Err(Error::InvalidArgument(format!("bad covariate law {other:?}"))),
        }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            CovariateLaw::StandardNormal => StandardNormal.sample(rng),
            CovariateLaw::Normal { sd } => {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }
            CovariateLaw::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Moment generating function and its first two derivatives at `t`.
    pub fn mgf(&self, t: f64) -> (f64, f64, f64) {
        match *self {
            CovariateLaw::StandardNormal => CovariateLaw::Normal { sd: 1.0 }.mgf(t),
            CovariateLaw::Normal { sd } => {
                let s2 = sd * sd;
                let phi = (0.5 * t * t * s2).exp();
                (phi, t * s2 * phi, (s2 + t * t * s2 * s2) * phi)
            }
            CovariateLaw::Bernoulli { p } => {
                let e = t.exp();
                (1.0 - p + p * e, p * e, p * e)
            }
        }
    }
}

fn default_beta_sd() -> f64 {
    10.0
}

fn default_log_sigma2_sd() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmModel {
    /// Number of groups.
    #[serde(default)]
    pub m: usize,
    /// Observations per group.
    pub n: usize,
    pub covariates: Vec<CovariateLaw>,
    #[serde(default = "default_beta_sd")]
    pub beta_prior_sd: f64,
    #[serde(default = "default_log_sigma2_sd")]
    pub log_sigma2_prior_sd: f64,
}

impl GlmmModel {
    pub fn new(m: usize, n: usize, covariates: Vec<CovariateLaw>) -> Self {
        GlmmModel {
            m,
            n,
            covariates,
            beta_prior_sd: default_beta_sd(),
            log_sigma2_prior_sd: default_log_sigma2_sd(),
        }
    }

    /// Groups of ten with four covariates: N(0,1), N(0,25), Bernoulli(0.4)
    /// and Bernoulli(0.8).
    pub fn reference_design(m: usize) -> Self {
        GlmmModel::new(
            m,
            10,
            vec![
                CovariateLaw::StandardNormal,
                CovariateLaw::Normal { sd: 5.0 },
                CovariateLaw::Bernoulli { p: 0.4 },
                CovariateLaw::Bernoulli { p: 0.8 },
            ],
        )
    }

    /// `β_0 = 5`, `β_1 = (0.2, -0.2, 2, -2)`, `σ² = 2`, as an unconstrained vector.
    pub fn reference_theta0() -> Vec<f64> {
        vec![5.0, 0.2, -0.2, 2.0, -2.0, 2f64.ln()]
    }

    pub fn validate(&self) -> Result<()> {
        for law in &self.covariates {
            law.validate()?;
        }
        if !(self.beta_prior_sd > 0.0 && self.log_sigma2_prior_sd > 0.0) {
            return Err(Error::InvalidArgument("glmm prior scales must be positive".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    pub fn coord_names(&self) -> Vec<String> {
        let mut v = vec!["beta0".to_string()];
        v.extend((1..=self.d()).map(|k| format!("beta1_{k}")));
        v.push("log_sigma2".into());
        v
    }

    /// Group by group: `U_i`, then for each member its covariates in order
    /// followed by the count.
    pub(crate) fn simulate(&self, theta: &[f64], rng: &mut Rng) -> Result<(GlmmData, Vec<f64>)> {
        let d = self.d();
        let sigma = (0.5 * theta[d + 1]).exp();
        let mut x = Vec::with_capacity(self.m * self.n * d);
        let mut y = Vec::with_capacity(self.m * self.n);
        let mut u = Vec::with_capacity(self.m);
        for _ in 0..self.m {
            let z: f64 = StandardNormal.sample(rng);
            let ui = sigma * z;
            u.push(ui);
            for _ in 0..self.n {
                let mut eta = theta[0] + ui;
                for (k, law) in self.covariates.iter().enumerate() {
                    let xv = law.sample(rng);
                    eta += theta[1 + k] * xv;
                    x.push(xv);
                }
                let rate = eta.exp();
                if !rate.is_finite() {
                    return Err(Error::non_finite(format!("poisson rate exp({eta})")));
                }
                let count = if rate > 0.0 {
                    let p =
                        Poisson::new(rate).map_err(|e| Error::InvalidArgument(format!("poisson rate {rate}: {e}")))?;
                    let v: f64 = p.sample(rng);
                    v as u64
                } else {
                    0
                };
                y.push(count);
            }
        }
        Ok((
            GlmmData {
                m: self.m,
                n: self.n,
                d,
                x,
                y,
            },
            u,
        ))
    }

    pub(crate) fn complete_loglik(&self, theta: &[f64], u: &[f64], data: &GlmmData) -> Result<f64> {
        if u.len() != data.m {
            return Err(Error::Dimension(format!(
                "{} random effects for {} groups",
                u.len(),
                data.m
            )));
        }
        let d = self.d();
        let sigma = (0.5 * theta[d + 1]).exp();
        let mut s = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            s += normal_logpdf(ui, 0.0, sigma);
            for j in 0..data.n {
                let eta = linear_predictor(theta, data.covariates(i, j)) + ui;
                let yv = data.count(i, j);
                s += yv as f64 * eta - eta.exp() - ln_factorial(yv);
            }
        }
        Ok(s)
    }
}

/// `β_0 + β_1·x`.
pub fn linear_predictor(theta: &[f64], x: &[f64]) -> f64 {
    theta[0] + x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>()
}
