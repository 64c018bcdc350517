//! Variational log likelihood `M_n(θ; x)` and the variational frequentist
//! estimate `argmax_θ M_n(θ; x)` by variational EM.
//!
//! `M_n` profiles the local factors out of the ELBO at point-mass globals
//! and leaves the prior out. For the mixture the supremum is attained at the
//! exact per-datum posteriors, so `M_n` is the exact log likelihood there.

mod lan;

pub use lan::{default_h_grid, fit_local_quadratic, lan_expansion_probe, probe_one, write_lan_csv, LanFit, LanRow};

use crate::error::{Error, Result};
use crate::meanfield::glmm::{local_newton, Stats};
use crate::meanfield::sbm::Context;
use crate::meanfield::{LocalFactors, MONOTONE_SLACK};
use crate::models::{enumerate_configs, GlmmModel, ModelInstance, Observations, SbmModel};
use crate::numeric::optim::{fd_hessian_from_gradient, maximize, FnObjective, NewtonOptions};
use crate::numeric::special::{log_sum_exp, sigmoid, softplus, LN_2PI};
use serde::{Deserialize, Serialize};

/// Tolerance of the SBM inner coordinate ascent when `M_n` is evaluated on
/// its own.
pub const INNER_TOL: f64 = 1e-10;
const INNER_MAX_SWEEPS: usize = 10_000;
/// Exhaustive profile start for the SBM inner problem when `K^n` is at most
/// this.
const PROFILE_START_BUDGET: f64 = 4096.0;
const ICM_MAX_PASSES: usize = 100;

/// `M_n(θ; x)` and the maximizing local factors.
pub fn variational_loglik(model: &ModelInstance, theta: &[f64], data: &Observations) -> Result<(f64, LocalFactors)> {
    VariationalLoglik::new(model, data)?.eval(theta, None)
}

enum Kind<'a> {
    Gmm(&'a [f64]),
    Glmm(&'a GlmmModel, Stats<'a>),
    Sbm(Context<'a>),
}

/// Reusable evaluator of `M_n` for one dataset.
pub struct VariationalLoglik<'a> {
    model: &'a ModelInstance,
    kind: Kind<'a>,
    inner_tol: f64,
}

impl<'a> VariationalLoglik<'a> {
    pub fn new(model: &'a ModelInstance, data: &'a Observations) -> Result<Self> {
        model.validate()?;
        model.check_data(data)?;
        let kind = match (model, data) {
            (ModelInstance::Gmm(_), Observations::Gmm { x }) => Kind::Gmm(x),
            (ModelInstance::Glmm(m), Observations::Glmm(d)) => Kind::Glmm(m, Stats::new(m, d)),
            (ModelInstance::Sbm(m), Observations::Sbm(d)) => Kind::Sbm(Context::new(m, d)?),
            _ => unreachable!("check_data rejects mismatched pairs"),
        };
        Ok(VariationalLoglik {
            model,
            kind,
            inner_tol: INNER_TOL,
        })
    }

    pub fn with_inner_tol(mut self, tol: f64) -> Self {
        self.inner_tol = tol;
        self
    }

    pub fn model(&self) -> &ModelInstance {
        self.model
    }

    /// Evaluate at `theta`; `warm` seeds the inner optimization (for the
    /// SBM it is tried in addition to the default starts).
    pub fn eval(&self, theta: &[f64], warm: Option<&LocalFactors>) -> Result<(f64, LocalFactors)> {
        self.model.check_theta(theta)?;
        let out = match &self.kind {
            Kind::Gmm(x) => gmm_eval(theta, x),
            Kind::Glmm(_, stats) => glmm_eval(stats, theta, warm),
            Kind::Sbm(ctx) => sbm_eval(ctx, theta, warm, self.inner_tol),
        }?;
        if !out.0.is_finite() {
            return Err(Error::non_finite(format!("M_n at {theta:?}")));
        }
        Ok(out)
    }

    /// Only the value. For the mixture this skips the responsibilities.
    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        match &self.kind {
            Kind::Gmm(x) => {
                self.model.check_theta(theta)?;
                let v = gmm_value(theta, x);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::non_finite(format!("M_n at {theta:?}")))
                }
            }
            _ => Ok(self.eval(theta, None)?.0),
        }
    }
}

fn gmm_value(mu: &[f64], x: &[f64]) -> f64 {
    let k = mu.len();
    let konst = x.len() as f64 * (-0.5 * LN_2PI - (k as f64).ln());
    let mut total = 0.0;
    if k == 2 {
        for &xi in x {
            let a = -0.5 * (xi - mu[0]) * (xi - mu[0]);
            let b = -0.5 * (xi - mu[1]) * (xi - mu[1]);
            total += a.max(b) + (-(a - b).abs()).exp().ln_1p();
        }
    } else {
        for &xi in x {
            let top = mu
                .iter()
                .map(|m| -0.5 * (xi - m) * (xi - m))
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = mu.iter().map(|m| (-0.5 * (xi - m) * (xi - m) - top).exp()).sum();
            total += top + s.ln();
        }
    }
    total + konst
}

fn gmm_eval(mu: &[f64], x: &[f64]) -> Result<(f64, LocalFactors)> {
    let k = mu.len();
    let mut r = vec![0.0; x.len() * k];
    let mut total = 0.0;
    let mut buf = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..k {
            buf[j] = crate::models::gmm::datum_loglik(&mu[j..j + 1], xi);
        }
        let l = log_sum_exp(&buf);
        for j in 0..k {
            r[i * k + j] = (buf[j] - l).exp();
        }
        // datum_loglik of a single component omits the 1/K weight
        total += l - (k as f64).ln();
    }
    Ok((total, LocalFactors::Responsibilities { k, r }))
}

/// Point-mass rate sums `S_i = Σ_j exp(β_0 + β_1·X_ij)` and the linear part.
fn glmm_point_terms(stats: &Stats, theta: &[f64]) -> (Vec<f64>, f64) {
    let d = stats.data.d;
    let mut sums = vec![0.0; stats.groups()];
    for i in 0..stats.groups() {
        for j in 0..stats.obs() {
            let eta = crate::models::glmm::linear_predictor(&theta[..d + 1], stats.data.covariates(i, j));
            sums[i] += eta.exp();
        }
    }
    let linear: f64 = (0..=d).map(|c| theta[c] * stats.lin[c]).sum::<f64>() - stats.log_fact;
    (sums, linear)
}

fn glmm_eval(stats: &Stats, theta: &[f64], warm: Option<&LocalFactors>) -> Result<(f64, LocalFactors)> {
    let rho = *theta.last().unwrap();
    let a = (-rho).exp();
    let (sums, linear) = glmm_point_terms(stats, theta);
    let m = stats.groups();
    let mut mu = vec![0.0; m];
    let mut lambda = vec![0.0; m];
    let mut total = linear;
    for i in 0..m {
        let (u0, l0) = match warm {
            Some(LocalFactors::Gaussian { mu, lambda }) if mu.len() == m => (mu[i], lambda[i]),
            _ => glmm_local_start(stats.y_tot[i], sums[i], a),
        };
        let (u, l, f) = local_newton(stats.y_tot[i], sums[i], a, u0, l0).map_err(|e| match e {
            Error::NewtonFailure(msg) => Error::InnerNonConvergence(format!("group {i}: {msg}")),
            other => other,
        })?;
        mu[i] = u;
        lambda[i] = l;
        total += f - 0.5 * rho + 0.5;
    }
    Ok((total, LocalFactors::Gaussian { mu, lambda }))
}

fn glmm_local_start(y: f64, s: f64, a: f64) -> (f64, f64) {
    let mu = ((y + 0.5) / s).ln().clamp(-30.0, 30.0);
    (mu, 1.0 / (y + a + 1.0))
}

fn sbm_inner(ctx: &Context, theta: &[f64], r: &mut [f64], tol: f64) -> Result<f64> {
    let k = ctx.k();
    let p = ctx.model.unpack(theta);
    let log_pi = p.log_pi();
    let sp: Vec<f64> = p.nu.iter().map(|&v| softplus(v)).collect();
    let mut prev = ctx.point_objective(theta, r);
    for _ in 0..INNER_MAX_SWEEPS {
        ctx.local_sweep(r, &log_pi, &p.nu, &sp);
        let v = ctx.point_objective(theta, r);
        if v < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
            return Err(Error::NonMonotone {
                context: "sbm inner coordinate ascent".into(),
                before: prev,
                after: v,
            });
        }
        if (v - prev).abs() <= tol * v.abs().max(1.0) {
            return Ok(v.max(prev));
        }
        prev = v;
    }
    let worst = (0..ctx.data.n)
        .max_by(|&a, &b| {
            let ea = crate::meanfield::sbm::entropy(&r[a * k..(a + 1) * k]);
            let eb = crate::meanfield::sbm::entropy(&r[b * k..(b + 1) * k]);
            ea.total_cmp(&eb)
        })
        .unwrap_or(0);
    Err(Error::InnerNonConvergence(format!(
        "sbm responsibilities after {INNER_MAX_SWEEPS} sweeps (least settled node {worst})"
    )))
}

fn one_hot(z: &[usize], k: usize) -> Vec<f64> {
    let mut r = vec![0.0; z.len() * k];
    for (i, &a) in z.iter().enumerate() {
        r[i * k + a] = 1.0;
    }
    r
}

/// Multi-start inner problem: degree-binned soft start, the ICM mode, the
/// exact profile configuration when enumerable, and an optional warm start.
/// A one-hot start has objective `log p(x, z|θ)`, which the ascent never
/// decreases, so the profile start makes `M_n` dominate the profile
/// likelihood.
fn sbm_eval(ctx: &Context, theta: &[f64], warm: Option<&LocalFactors>, tol: f64) -> Result<(f64, LocalFactors)> {
    let k = ctx.k();
    let n = ctx.data.n;
    let p = ctx.model.unpack(theta);
    let log_pi = p.log_pi();
    let bins = ctx.degree_bins();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(LocalFactors::Responsibilities { k: kw, r }) = warm {
        if *kw == k && r.len() == n * k {
            starts.push(r.clone());
        }
    }
    let (_, soft) = LocalFactors::smoothed_one_hot(&bins, k, 0.1)
        .responsibilities()
        .map(|(k, r)| (k, r.to_vec()))
        .unwrap();
    starts.push(soft);
    let mut z = bins;
    for _ in 0..ICM_MAX_PASSES {
        if !ctx.icm_pass(&mut z, &log_pi, &p.nu) {
            break;
        }
    }
    starts.push(one_hot(&z, k));
    if (k as f64).powi(n as i32) <= PROFILE_START_BUDGET {
        let (_, best) = enumerate_configs(k, n, |z| ctx.model.complete_loglik(theta, z, ctx.data))?;
        starts.push(one_hot(&best, k));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mut r in starts {
        let v = sbm_inner(ctx, theta, &mut r, tol)?;
        if best.as_ref().map_or(true, |(b, _)| v > *b) {
            best = Some((v, r));
        }
    }
    let (v, r) = best.expect("at least one start");
    Ok((v, LocalFactors::Responsibilities { k, r }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfeResult {
    pub theta_hat: Vec<f64>,
    pub m_n_value: f64,
    pub em_iterations: usize,
    /// Objective after each E step.
    pub inner_traces: Vec<f64>,
    pub converged: bool,
}

/// Deterministic starting point: the means of the mean-field default init.
pub fn default_vfe_init(model: &ModelInstance, data: &Observations) -> Result<Vec<f64>> {
    Ok(crate::meanfield::default_init(model, data)?.globals.means)
}

/// Variational EM: exact E steps over the local factors, Newton M steps on
/// the E-completed objective, stopping at relative change below `tol`.
pub fn fit_vfe(
    model: &ModelInstance,
    data: &Observations,
    init_theta: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<VfeResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    model.check_theta(init_theta)?;
    let inner_tol = (tol * 1e-2).max(1e-14);
    let eval = VariationalLoglik::new(model, data)?.with_inner_tol(inner_tol);
    let mut theta = init_theta.to_vec();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    if let Kind::Glmm(_, stats) = &eval.kind {
        if stats.lin[0] == 0.0 {
            return Err(Error::DegenerateData(
                "all counts are zero; the intercept estimate diverges to -infinity".into(),
            ));
        }
    }
    let mut locals: Option<LocalFactors> = None;
    while iterations < max_iter {
        iterations += 1;
        // E step
        let (value, q) = match (&eval.kind, &locals) {
            (Kind::Sbm(ctx), Some(LocalFactors::Responsibilities { k, r })) => {
                let mut r = r.clone();
                let v = sbm_inner(ctx, &theta, &mut r, inner_tol)?;
                (v, LocalFactors::Responsibilities { k: *k, r })
            }
            _ => eval.eval(&theta, locals.as_ref())?,
        };
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if value < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
                return Err(Error::NonMonotone {
                    context: format!("{} variational EM iteration {iterations}", model.name()),
                    before: prev,
                    after: value,
                });
            }
            trace.push(value);
            if ((value - prev) / value.abs().max(1.0)).abs() < tol {
                converged = true;
                locals = Some(q);
                break;
            }
        } else {
            trace.push(value);
        }
        // M step
        let mut q = q;
        theta = match &eval.kind {
            Kind::Gmm(x) => gmm_m_step(&theta, x, &q),
            Kind::Glmm(m, stats) => glmm_m_step(m, stats, &theta, &mut q)?,
            Kind::Sbm(ctx) => sbm_m_step(ctx, &theta, &q)?,
        };
        locals = Some(q);
    }
    let _ = locals;
    let m_n_value = eval.value(&theta)?;
    Ok(VfeResult {
        theta_hat: theta,
        m_n_value,
        em_iterations: iterations,
        inner_traces: trace,
        converged,
    })
}

fn gmm_m_step(theta: &[f64], x: &[f64], q: &LocalFactors) -> Vec<f64> {
    let (k, r) = q.responsibilities().expect("gmm locals are responsibilities");
    let mut out = theta.to_vec();
    for j in 0..k {
        let (mut nk, mut sx) = (0.0, 0.0);
        for (i, &xi) in x.iter().enumerate() {
            nk += r[i * k + j];
            sx += r[i * k + j] * xi;
        }
        if nk > 0.0 {
            out[j] = sx / nk;
        }
    }
    out
}

fn glmm_m_step(model: &GlmmModel, stats: &Stats, theta: &[f64], q: &mut LocalFactors) -> Result<Vec<f64>> {
    let LocalFactors::Gaussian { mu, lambda } = q else {
        unreachable!("glmm locals are Gaussian")
    };
    let d = model.covariates.len();
    let p = d + 1;
    let w: Vec<f64> = mu.iter().zip(lambda.iter()).map(|(u, l)| u + 0.5 * l).collect();
    let n = stats.obs();
    let deriv = |beta: &[f64], want_h: bool| {
        let mut f: f64 = (0..p).map(|c| beta[c] * stats.lin[c]).sum();
        let mut g = stats.lin.clone();
        let mut h = vec![0.0; if want_h { p * p } else { 0 }];
        for o in 0..stats.groups() * n {
            let x = stats.data.covariates(o / n, o % n);
            let e = (crate::models::glmm::linear_predictor(beta, x) + w[o / n]).exp();
            f -= e;
            for c in 0..p {
                let xc = if c == 0 { 1.0 } else { x[c - 1] };
                g[c] -= e * xc;
                if want_h {
                    for c2 in 0..=c {
                        let xc2 = if c2 == 0 { 1.0 } else { x[c2 - 1] };
                        h[c * p + c2] -= e * xc * xc2;
                    }
                }
            }
        }
        if want_h {
            for c in 0..p {
                for c2 in 0..c {
                    h[c2 * p + c] = h[c * p + c2];
                }
            }
        }
        (f, g, h)
    };
    let mut obj = FnObjective {
        value: |b: &[f64]| deriv(b, false).0,
        derivatives: |b: &[f64]| deriv(b, true),
    };
    let out = maximize(&mut obj, &theta[..p], NewtonOptions::default())?;
    if !out.converged {
        return Err(Error::NewtonFailure("glmm M step did not converge".into()));
    }
    let mut next = out.x;
    // exact shift along (β_0 + δ, μ_i − δ), then the closed-form variance
    let delta = mu.iter().sum::<f64>() / mu.len() as f64;
    next[0] += delta;
    for u in mu.iter_mut() {
        *u -= delta;
    }
    let s2 = mu.iter().zip(lambda.iter()).map(|(u, l)| u * u + l).sum::<f64>() / mu.len() as f64;
    next.push(s2.ln());
    Ok(next)
}

/// Gradient of the E-completed SBM objective in θ.
fn sbm_completed(ctx: &Context, theta: &[f64], r: &[f64]) -> (f64, Vec<f64>) {
    let k = ctx.k();
    let model: &SbmModel = ctx.model;
    let c = ctx.counts(r);
    let p = model.unpack(theta);
    let log_pi = p.log_pi();
    let n = ctx.data.n as f64;
    let mut f: f64 = (0..k).map(|a| c.n_a[a] * log_pi[a]).sum();
    let mut g = vec![0.0; theta.len()];
    for a in 0..k - 1 {
        g[a] = c.n_a[a] - n * log_pi[a].exp();
    }
    for a in 0..k {
        for b in a..k {
            let ab = a * k + b;
            let nu = p.nu[ab];
            let (o, pp) = if a == b {
                (0.5 * c.o_ab[ab], 0.5 * c.p_ab[ab])
            } else {
                (c.o_ab[ab], c.p_ab[ab])
            };
            f += o * nu - pp * softplus(nu);
            g[model.nu_index(a, b)] = o - pp * sigmoid(nu);
        }
    }
    (f, g)
}

const SBM_FD_STEP: f64 = 1e-5;

fn sbm_m_step(ctx: &Context, theta: &[f64], q: &LocalFactors) -> Result<Vec<f64>> {
    let (_, r) = q.responsibilities().expect("sbm locals are responsibilities");
    let mut obj = FnObjective {
        value: |t: &[f64]| sbm_completed(ctx, t, r).0,
        derivatives: |t: &[f64]| {
            let (f, g) = sbm_completed(ctx, t, r);
            let h = fd_hessian_from_gradient(t, SBM_FD_STEP, |tt| sbm_completed(ctx, tt, r).1);
            (f, g, h)
        },
    };
    let out = maximize(&mut obj, theta, NewtonOptions::default())?;
    if !out.converged {
        return Err(Error::NewtonFailure(
            "sbm M step did not converge (a block pair may have no or only edges)".into(),
        ));
    }
    Ok(out.x)
}
