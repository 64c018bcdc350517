//! Generative models, simulators and exact likelihood oracles.
//!
//! Global parameters always travel as an unconstrained vector:
//!
//! * GMM: `(μ_1, …, μ_K)`
//! * GLMM: `(β_0, β_1[1..d], log σ²)`
//! * SBM: `(ω_1, …, ω_{K-1}, ν_11, ν_12, …, ν_1K, ν_22, …, ν_KK)` with ω the
//!   log odds of class `a` against class `K` and ν the edge log odds
//!   (upper triangle of the symmetric matrix, row-major).

mod dataset;
pub mod glmm;
pub mod gmm;
pub mod sbm;

pub use dataset::{Dataset, GlmmData, Locals, Observations, SbmData};
pub use glmm::{CovariateLaw, GlmmModel};
pub use gmm::GmmModel;
pub use sbm::SbmModel;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest number of local configurations the brute-force oracles enumerate.
pub const ENUMERATION_BUDGET: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelInstance {
    Gmm(GmmModel),
    Glmm(GlmmModel),
    Sbm(SbmModel),
}

impl ModelInstance {
    pub fn name(&self) -> &'static str {
        match self {
            ModelInstance::Gmm(_) => "gmm",
            ModelInstance::Glmm(_) => "glmm",
            ModelInstance::Sbm(_) => "sbm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelInstance::Gmm(m) => m.validate(),
            ModelInstance::Glmm(m) => m.validate(),
            ModelInstance::Sbm(m) => m.validate(),
        }
    }

    /// Number of global coordinates `d`.
    pub fn global_dim(&self) -> usize {
        match self {
            ModelInstance::Gmm(m) => m.k,
            ModelInstance::Glmm(m) => m.covariates.len() + 2,
            ModelInstance::Sbm(m) => m.global_dim(),
        }
    }

    pub fn coord_names(&self) -> Vec<String> {
        match self {
            ModelInstance::Gmm(m) => (1..=m.k).map(|k| format!("mu{k}")).collect(),
            ModelInstance::Glmm(m) => m.coord_names(),
            ModelInstance::Sbm(m) => m.coord_names(),
        }
    }

    /// Coordinates carried on the log scale (σ² for the GLMM).
    pub fn log_scale_coords(&self) -> Vec<bool> {
        let mut v = vec![false; self.global_dim()];
        if let ModelInstance::Glmm(_) = self {
            *v.last_mut().unwrap() = true;
        }
        v
    }

    /// The sample-size knob swept by experiments: n for GMM and SBM, the
    /// group count m for the GLMM.
    pub fn size(&self) -> usize {
        match self {
            ModelInstance::Gmm(m) => m.n,
            ModelInstance::Glmm(m) => m.m,
            ModelInstance::Sbm(m) => m.n,
        }
    }

    pub fn with_size(&self, size: usize) -> ModelInstance {
        let mut out = self.clone();
        match &mut out {
            ModelInstance::Gmm(m) => m.n = size,
            ModelInstance::Glmm(m) => m.m = size,
            ModelInstance::Sbm(m) => m.n = size,
        }
        out
    }

    /// Component count for label-switching models.
    pub fn label_classes(&self) -> Option<usize> {
        match self {
            ModelInstance::Gmm(m) => Some(m.k),
            ModelInstance::Sbm(m) => Some(m.k),
            ModelInstance::Glmm(_) => None,
        }
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.global_dim() {
            return Err(Error::Dimension(format!(
                "{} expects {} global coordinates, got {}",
                self.name(),
                self.global_dim(),
                theta.len()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("theta[{i}]")));
        }
        Ok(())
    }

    pub fn check_data(&self, data: &Observations) -> Result<()> {
        match (self, data) {
            (ModelInstance::Gmm(_), Observations::Gmm { x }) => {
                if let Some(i) = x.iter().position(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("x[{i}]")));
                }
                Ok(())
            }
            (ModelInstance::Glmm(m), Observations::Glmm(d)) => d.check(m),
            (ModelInstance::Sbm(_), Observations::Sbm(d)) => d.check(),
            _ => Err(Error::Dimension(format!(
                "{} model paired with {} observations",
                self.name(),
                data.kind()
            ))),
        }
    }

    pub fn log_prior(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let sds = self.prior_sds();
        Ok(theta
            .iter()
            .zip(&sds)
            .map(|(&t, &s)| crate::numeric::special::normal_logpdf(t, 0.0, s))
            .sum())
    }

    /// Prior standard deviation of each (unconstrained) global coordinate;
    /// every prior is a centred normal.
    pub fn prior_sds(&self) -> Vec<f64> {
        match self {
            ModelInstance::Gmm(m) => vec![m.prior_mean_sd; m.k],
            ModelInstance::Glmm(m) => {
                let mut v = vec![m.beta_prior_sd; m.covariates.len() + 1];
                v.push(m.log_sigma2_prior_sd);
                v
            }
            ModelInstance::Sbm(m) => vec![m.prior_sd; m.global_dim()],
        }
    }
}

/// Draw a dataset from the joint model at `theta0`.
///
/// Draw order is fixed (documented per model) so that a seed reproduces the
/// dataset bit for bit.
pub fn simulate(model: &ModelInstance, theta0: &[f64], seed: u64) -> Result<Dataset> {
    model.validate()?;
    model.check_theta(theta0)?;
    let mut rng = crate::rng::rng_from_seed(seed);
    let (data, locals) = match model {
        ModelInstance::Gmm(m) => {
            let (x, c) = m.simulate(theta0, &mut rng);
            (Observations::Gmm { x }, Locals::Gmm(c))
        }
        ModelInstance::Glmm(m) => {
            let (d, u) = m.simulate(theta0, &mut rng)?;
            (Observations::Glmm(d), Locals::Glmm(u))
        }
        ModelInstance::Sbm(m) => {
            let (d, z) = m.simulate(theta0, &mut rng)?;
            (Observations::Sbm(d), Locals::Sbm(z))
        }
    };
    Ok(Dataset {
        model: model.clone(),
        theta0: theta0.to_vec(),
        seed,
        data,
        locals: Some(locals),
    })
}

/// `log p(x, z | θ)` without the prior.
pub fn complete_loglik(model: &ModelInstance, theta: &[f64], locals: &Locals, data: &Observations) -> Result<f64> {
    model.check_theta(theta)?;
    model.check_data(data)?;
    let v = match (model, locals, data) {
        (ModelInstance::Gmm(m), Locals::Gmm(c), Observations::Gmm { x }) => m.complete_loglik(theta, c, x)?,
        (ModelInstance::Glmm(m), Locals::Glmm(u), Observations::Glmm(d)) => m.complete_loglik(theta, u, d)?,
        (ModelInstance::Sbm(m), Locals::Sbm(z), Observations::Sbm(d)) => m.complete_loglik(theta, z, d)?,
        _ => {
            return Err(Error::Dimension(format!(
                "locals of kind {} do not match the {} model",
                locals.kind(),
                model.name()
            )))
        }
    };
    if !v.is_finite() {
        return Err(Error::non_finite("complete log likelihood"));
    }
    Ok(v)
}

/// `log p(θ) + Σ log p(z_i|θ) + Σ log p(x_i|z_i, θ)`.
pub fn log_joint(model: &ModelInstance, theta: &[f64], locals: &Locals, data: &Observations) -> Result<f64> {
    Ok(model.log_prior(theta)? + complete_loglik(model, theta, locals, data)?)
}

/// Exact `log Σ_z p(θ, x, z)` by enumerating every local configuration.
pub fn log_marginal_brute(model: &ModelInstance, theta: &[f64], data: &Observations) -> Result<f64> {
    model.check_theta(theta)?;
    model.check_data(data)?;
    let prior = model.log_prior(theta)?;
    let lik = match (model, data) {
        (ModelInstance::Gmm(m), Observations::Gmm { x }) => {
            enumerate_configs(m.k, x.len(), |c| m.complete_loglik(theta, c, x))?.0
        }
        (ModelInstance::Sbm(m), Observations::Sbm(d)) => {
            enumerate_configs(m.k, d.n, |z| m.complete_loglik(theta, z, d))?.0
        }
        (ModelInstance::Glmm(_), _) => {
            return Err(Error::Unsupported {
                model: "glmm",
                what: "brute-force marginal needs discrete locals".into(),
            })
        }
        _ => unreachable!("check_data rejects mismatched pairs"),
    };
    Ok(prior + lik)
}

/// `argmax_z p(x, z | θ)`.
///
/// GMM locals decouple, so each datum takes its nearest mean (ties go to the
/// smallest component index). SBM configurations are enumerated; ties go to
/// the first configuration in lexicographic order of `(z_1, …, z_n)`.
pub fn profile_locals(model: &ModelInstance, theta: &[f64], data: &Observations) -> Result<Locals> {
    model.check_theta(theta)?;
    model.check_data(data)?;
    match (model, data) {
        (ModelInstance::Gmm(m), Observations::Gmm { x }) => Ok(Locals::Gmm(m.profile(theta, x))),
        (ModelInstance::Sbm(m), Observations::Sbm(d)) => {
            let (_, best) = enumerate_configs(m.k, d.n, |z| m.complete_loglik(theta, z, d))?;
            Ok(Locals::Sbm(best))
        }
        (ModelInstance::Glmm(_), _) => Err(Error::Unsupported {
            model: "glmm",
            what: "profile locals need discrete local variables".into(),
        }),
        _ => unreachable!("check_data rejects mismatched pairs"),
    }
}

/// Visit all `k^n` label vectors in lexicographic order; returns the
/// log-sum-exp of `f` and the first maximizer.
pub(crate) fn enumerate_configs(
    k: usize,
    n: usize,
    mut f: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<(f64, Vec<usize>)> {
    let size = (k as f64).powi(n as i32);
    if size > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            size,
            budget: ENUMERATION_BUDGET,
        });
    }
    let mut z = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    let mut best_z = z.clone();
    // streaming log-sum-exp
    let mut max = f64::NEG_INFINITY;
    let mut acc = 0.0;
    loop {
        let v = f(&z)?;
        if v > best {
            best = v;
            best_z.copy_from_slice(&z);
        }
        if v > max {
            acc = acc * (max - v).exp() + 1.0;
            max = v;
        } else {
            acc += (v - max).exp();
        }
        // increment, last position fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                let lse = if max.is_finite() { max + acc.ln() } else { max };
                return Ok((lse, best_z));
            }
            pos -= 1;
            z[pos] += 1;
            if z[pos] < k {
                break;
            }
            z[pos] = 0;
        }
    }
}
