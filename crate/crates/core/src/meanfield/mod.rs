//! Mean-field variational Bayes by coordinate ascent on the ELBO.
//!
//! Every global coordinate gets an independent Gaussian factor on the
//! unconstrained scale. Locals are categorical responsibilities (GMM, SBM)
//! or Gaussian factors `N(μ_i, λ_i)` on the random intercepts (GLMM). Each
//! sweep updates all locals first, then the globals.

pub(crate) mod glmm;
pub(crate) mod gmm;
pub(crate) mod sbm;

use crate::error::{Error, Result};
use crate::gaussian_kl::Gaussian;
use crate::models::{ModelInstance, Observations};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Allowed decrease between successive ELBO values, relative to
/// `max(1, |ELBO|)`; absorbs rounding in sums of many terms.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Tolerance for responsibility rows summing to one.
const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalGaussianFactors {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl GlobalGaussianFactors {
    pub fn new(means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        let g = GlobalGaussianFactors { means, sds };
        g.check()?;
        Ok(g)
    }

    /// Factors centred at `theta` with a common small sd.
    pub fn concentrated(theta: &[f64], sd: f64) -> Result<Self> {
        GlobalGaussianFactors::new(theta.to_vec(), vec![sd; theta.len()])
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.means.len() != self.sds.len() {
            return Err(Error::Dimension(format!(
                "{} means but {} sds",
                self.means.len(),
                self.sds.len()
            )));
        }
        if let Some(i) = self.means.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("global factor mean {i}")));
        }
        if let Some(i) = self.sds.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "global factor sd {i} is {}",
                self.sds[i]
            )));
        }
        Ok(())
    }

    pub fn to_gaussian(&self) -> Gaussian {
        let v: Vec<f64> = self.sds.iter().map(|s| s * s).collect();
        Gaussian::diagonal(self.means.clone(), &v).expect("sds validated positive")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalFactors {
    /// Row-major `n × k` matrix of `q(z_i = a)`.
    Responsibilities { k: usize, r: Vec<f64> },
    /// `q(U_i) = N(mu_i, lambda_i)`.
    Gaussian { mu: Vec<f64>, lambda: Vec<f64> },
}

impl LocalFactors {
    pub fn uniform(n: usize, k: usize) -> Self {
        LocalFactors::Responsibilities {
            k,
            r: vec![1.0 / k as f64; n * k],
        }
    }

    /// `(1-eps)·onehot(z_i) + eps/k` per row.
    pub fn smoothed_one_hot(z: &[usize], k: usize, eps: f64) -> Self {
        let mut r = vec![eps / k as f64; z.len() * k];
        for (i, &a) in z.iter().enumerate() {
            r[i * k + a] += 1.0 - eps;
        }
        LocalFactors::Responsibilities { k, r }
    }

    pub fn len(&self) -> usize {
        match self {
            LocalFactors::Responsibilities { k, r } => r.len() / k.max(&1),
            LocalFactors::Gaussian { mu, .. } => mu.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn responsibilities(&self) -> Option<(usize, &[f64])> {
        match self {
            LocalFactors::Responsibilities { k, r } => Some((*k, r)),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            LocalFactors::Responsibilities { k, r } => {
                if *k == 0 || r.len() % k != 0 {
                    return Err(Error::Dimension(format!("{} responsibilities for k={k}", r.len())));
                }
                for (i, row) in r.chunks(*k).enumerate() {
                    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::InvalidArgument(format!(
                            "responsibility row {i} has invalid entries"
                        )));
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::InvalidArgument(format!("responsibility row {i} sums to {s}")));
                    }
                }
                Ok(())
            }
            LocalFactors::Gaussian { mu, lambda } => {
                if mu.len() != lambda.len() {
                    return Err(Error::Dimension("local means and variances differ in length".into()));
                }
                if let Some(i) = mu.iter().position(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("local mean {i}")));
                }
                if let Some(i) = lambda.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidArgument(format!("local variance {i} is {}", lambda[i])));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub globals: GlobalGaussianFactors,
    pub locals: LocalFactors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VbResult {
    pub globals: GlobalGaussianFactors,
    pub locals: LocalFactors,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Which coordinates are log transforms of a positive parameter.
    pub log_scale: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct VbResultJson {
    global_means: Vec<f64>,
    global_sds: Vec<f64>,
    elbo_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    #[serde(default)]
    log_scale: Vec<bool>,
    #[serde(default)]
    locals: Option<LocalFactors>,
}

impl VbResult {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VbResultJson {
            global_means: self.globals.means.clone(),
            global_sds: self.globals.sds.clone(),
            elbo_trace: self.elbo_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            log_scale: self.log_scale.clone(),
            locals: Some(self.locals.clone()),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: VbResultJson =
            serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("VB result JSON: {e}")))?;
        let d = j.global_means.len();
        Ok(VbResult {
            globals: GlobalGaussianFactors::new(j.global_means, j.global_sds)?,
            locals: j.locals.unwrap_or(LocalFactors::Gaussian {
                mu: vec![],
                lambda: vec![],
            }),
            elbo_trace: j.elbo_trace,
            iterations: j.iterations,
            converged: j.converged,
            log_scale: if j.log_scale.is_empty() {
                vec![false; d]
            } else {
                j.log_scale
            },
        })
    }

    pub fn write_elbo_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,elbo")?;
        for (i, v) in self.elbo_trace.iter().enumerate() {
            writeln!(w, "{i},{v:e}")?;
        }
        Ok(())
    }
}

/// `E_q[log p(θ, x, z)] - E_q[log q]`.
pub fn elbo(
    model: &ModelInstance,
    data: &Observations,
    globals: &GlobalGaussianFactors,
    locals: &LocalFactors,
) -> Result<f64> {
    check_inputs(model, data, globals, locals)?;
    let v = match (model, data) {
        (ModelInstance::Gmm(m), Observations::Gmm { x }) => {
            let (_, r) = locals.responsibilities().expect("checked");
            gmm::elbo(m, x, globals, r)
        }
        (ModelInstance::Glmm(m), Observations::Glmm(d)) => {
            let stats = glmm::Stats::new(m, d);
            match locals {
                LocalFactors::Gaussian { mu, lambda } => glmm::elbo(&stats, globals, mu, lambda)?,
                _ => unreachable!("checked"),
            }
        }
        (ModelInstance::Sbm(m), Observations::Sbm(d)) => {
            let (_, r) = locals.responsibilities().expect("checked");
            let ctx = sbm::Context::new(m, d)?;
            ctx.elbo(globals, r)
        }
        _ => unreachable!("check_data rejects mismatched pairs"),
    };
    if !v.is_finite() {
        return Err(Error::non_finite("ELBO"));
    }
    Ok(v)
}

fn check_inputs(
    model: &ModelInstance,
    data: &Observations,
    globals: &GlobalGaussianFactors,
    locals: &LocalFactors,
) -> Result<()> {
    model.validate()?;
    model.check_data(data)?;
    globals.check()?;
    locals.check()?;
    if globals.dim() != model.global_dim() {
        return Err(Error::Dimension(format!(
            "{} global factors for a model with {} coordinates",
            globals.dim(),
            model.global_dim()
        )));
    }
    let (n_locals, kind_ok) = match (model, locals) {
        (ModelInstance::Gmm(m), LocalFactors::Responsibilities { k, .. }) => (data_len(data), *k == m.k),
        (ModelInstance::Sbm(m), LocalFactors::Responsibilities { k, .. }) => (data_len(data), *k == m.k),
        (ModelInstance::Glmm(_), LocalFactors::Gaussian { .. }) => (data_len(data), true),
        _ => (0, false),
    };
    if !kind_ok || n_locals != locals.len() {
        return Err(Error::Dimension(format!(
            "local factors ({} entries) do not match the {} data",
            locals.len(),
            model.name()
        )));
    }
    Ok(())
}

fn data_len(data: &Observations) -> usize {
    match data {
        Observations::Gmm { x } => x.len(),
        Observations::Glmm(d) => d.m,
        Observations::Sbm(d) => d.n,
    }
}

/// Deterministic, seed-free starting point.
///
/// * GMM: means at the `k/(K+1)` sample quantiles, sds 1.
/// * GLMM: globals at zero with sd 0.01, `μ_i = log(ȳ_i + 0.5)`, `λ_i = 0.1`.
/// * SBM: responsibilities from degree-quantile binning, globals from the
///   implied block frequencies with sd 0.1.
pub fn default_init(model: &ModelInstance, data: &Observations) -> Result<VariationalState> {
    model.validate()?;
    model.check_data(data)?;
    match (model, data) {
        (ModelInstance::Gmm(m), Observations::Gmm { x }) => Ok(gmm::init(m, x)),
        (ModelInstance::Glmm(m), Observations::Glmm(d)) => Ok(glmm::init(m, d)),
        (ModelInstance::Sbm(m), Observations::Sbm(d)) => sbm::Context::new(m, d)?.init(),
        _ => unreachable!("check_data rejects mismatched pairs"),
    }
}

/// Coordinate ascent until the relative ELBO change drops below `tol`.
pub fn fit_vb(
    model: &ModelInstance,
    data: &Observations,
    init: VariationalState,
    tol: f64,
    max_iter: usize,
) -> Result<VbResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    check_inputs(model, data, &init.globals, &init.locals)?;
    let VariationalState {
        mut globals,
        mut locals,
    } = init;
    let mut sweeper: Box<dyn Sweeper + '_> = match (model, data) {
        (ModelInstance::Gmm(m), Observations::Gmm { x }) => Box::new(gmm::Sweep::new(m, x)),
        (ModelInstance::Glmm(m), Observations::Glmm(d)) => Box::new(glmm::Sweep::new(m, d)?),
        (ModelInstance::Sbm(m), Observations::Sbm(d)) => Box::new(sbm::Context::new(m, d)?.sweeper()?),
        _ => unreachable!("check_data rejects mismatched pairs"),
    };
    let mut trace = vec![sweeper.elbo(&globals, &locals)?];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        sweeper.sweep(&mut globals, &mut locals)?;
        let value = sweeper.elbo(&globals, &locals)?;
        let prev = *trace.last().unwrap();
        if !value.is_finite() {
            return Err(Error::non_finite(format!("ELBO after sweep {iterations}")));
        }
        if value < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
            return Err(Error::NonMonotone {
                context: format!("{} CAVI sweep {iterations}", model.name()),
                before: prev,
                after: value,
            });
        }
        trace.push(value);
        if ((value - prev) / value.abs().max(1.0)).abs() < tol {
            converged = true;
            break;
        }
    }
    Ok(VbResult {
        globals,
        locals,
        elbo_trace: trace,
        iterations,
        converged,
        log_scale: model.log_scale_coords(),
    })
}

/// One full CAVI sweep plus ELBO evaluation, with per-model cached data.
pub(crate) trait Sweeper {
    fn sweep(&mut self, globals: &mut GlobalGaussianFactors, locals: &mut LocalFactors) -> Result<()>;
    fn elbo(&mut self, globals: &GlobalGaussianFactors, locals: &LocalFactors) -> Result<f64>;
}

/// VB estimate on both scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vbe {
    /// Factor means on the unconstrained scale.
    pub unconstrained: Vec<f64>,
    /// Posterior means of the natural parameters: the lognormal mean
    /// `exp(m + s²/2)` for log-scale coordinates, the factor mean otherwise.
    pub natural: Vec<f64>,
}

pub fn vbe(result: &VbResult) -> Vbe {
    vbe_from_factors(&result.globals.means, &result.globals.sds, &result.log_scale)
}

/// Works for degenerate (zero-sd) factors too.
pub fn vbe_from_factors(means: &[f64], sds: &[f64], log_scale: &[bool]) -> Vbe {
    let natural = means
        .iter()
        .zip(sds)
        .enumerate()
        .map(|(i, (&m, &s))| {
            if log_scale.get(i).copied().unwrap_or(false) {
                (m + 0.5 * s * s).exp()
            } else {
                m
            }
        })
        .collect();
    Vbe {
        unconstrained: means.to_vec(),
        natural,
    }
}
