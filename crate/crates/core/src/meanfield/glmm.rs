//! CAVI for the Poisson random-intercept model.
//!
//! With `q(β_0) q(β_1) q(log σ²) Π q(U_i)` all Gaussian every expectation in
//! the ELBO is closed form: `E exp(a) = exp(mean + var/2)` handles the
//! Poisson rate and `E σ^{-2} = exp(-m_ρ + s_ρ²/2)` the random-effect
//! precision. Each global coordinate is updated by a 2-D Newton step on its
//! (mean, log sd) pair, each group by a 2-D Newton step on (μ_i, log λ_i).
//!
//! The intercept and the random effects are nearly confounded, which makes
//! plain coordinate ascent crawl. After the coordinate updates each sweep
//! moves `(β_0 + δ, μ_i - δ)` along the exact line maximizer; the Poisson
//! terms are invariant along that line so only the two Gaussian penalties
//! enter.

use super::{GlobalGaussianFactors, LocalFactors, Sweeper, VariationalState};
use crate::error::{Error, Result};
use crate::models::{GlmmData, GlmmModel};
use crate::numeric::optim::{maximize_2d, NewtonOptions};
use crate::numeric::special::{ln_factorial, LN_2PI};

/// Data summaries shared by the VB and VFE code paths.
pub(crate) struct Stats<'a> {
    pub data: &'a GlmmData,
    /// `Σ_j Y_ij` per group.
    pub y_tot: Vec<f64>,
    /// `Σ_ij Y_ij X_ijc` with `X_ij0 = 1`.
    pub lin: Vec<f64>,
    /// `Σ_ij log Y_ij!`.
    pub log_fact: f64,
    pub prior_sds: Vec<f64>,
}

impl<'a> Stats<'a> {
    pub(crate) fn new(model: &GlmmModel, data: &'a GlmmData) -> Self {
        let d = data.d;
        let mut y_tot = vec![0.0; data.m];
        let mut lin = vec![0.0; d + 1];
        let mut log_fact = 0.0;
        for i in 0..data.m {
            for j in 0..data.n {
                let y = data.count(i, j);
                let yf = y as f64;
                y_tot[i] += yf;
                lin[0] += yf;
                for (c, xv) in data.covariates(i, j).iter().enumerate() {
                    lin[c + 1] += yf * xv;
                }
                log_fact += ln_factorial(y);
            }
        }
        let mut prior_sds = vec![model.beta_prior_sd; d + 1];
        prior_sds.push(model.log_sigma2_prior_sd);
        Stats {
            data,
            y_tot,
            lin,
            log_fact,
            prior_sds,
        }
    }

    pub(crate) fn groups(&self) -> usize {
        self.data.m
    }

    pub(crate) fn obs(&self) -> usize {
        self.data.n
    }

    /// Covariate `c` of observation `(i, j)`, with `c = 0` the intercept.
    #[inline]
    pub(crate) fn covariate(&self, obs: usize, c: usize) -> f64 {
        if c == 0 {
            1.0
        } else {
            self.data.x[obs * self.data.d + c - 1]
        }
    }

    /// `log E exp(β_0 + β_1·X_ij)` under the global factors, per observation.
    pub(crate) fn expected_log_rates(&self, g: &GlobalGaussianFactors) -> Vec<f64> {
        let d = self.data.d;
        let base = g.means[0] + 0.5 * g.sds[0] * g.sds[0];
        (0..self.data.m * self.data.n)
            .map(|o| {
                let x = &self.data.x[o * d..(o + 1) * d];
                base + x
                    .iter()
                    .enumerate()
                    .map(|(k, &xv)| g.means[k + 1] * xv + 0.5 * (g.sds[k + 1] * xv).powi(2))
                    .sum::<f64>()
            })
            .collect()
    }

    /// Group sums `Σ_j exp(eta_ij)`.
    pub(crate) fn group_rate_sums(&self, eta: &[f64]) -> Vec<f64> {
        eta.chunks(self.data.n.max(1))
            .take(self.data.m)
            .map(|c| c.iter().map(|e| e.exp()).sum())
            .collect()
    }
}

/// Per-group objective `f(μ, λ) = Yμ − S e^{μ+λ/2} − (a/2)(μ² + λ) + ½ log λ`
/// maximized in `(μ, log λ)`.
pub(crate) fn local_newton(y: f64, s: f64, a: f64, mu: f64, lambda: f64) -> Result<(f64, f64, f64)> {
    let value = |p: [f64; 2]| {
        let lam = p[1].exp();
        y * p[0] - s * (p[0] + 0.5 * lam).exp() - 0.5 * a * (p[0] * p[0] + lam) + 0.5 * p[1]
    };
    let derivs = |p: [f64; 2]| {
        let lam = p[1].exp();
        let e = s * (p[0] + 0.5 * lam).exp();
        let f = y * p[0] - e - 0.5 * a * (p[0] * p[0] + lam) + 0.5 * p[1];
        let h = 0.5 * lam;
        (
            f,
            [y - e - a * p[0], -e * h - a * h + 0.5],
            [-e - a, -e * h, -e * h * h - e * h - a * h],
        )
    };
    let (p, f, _) = maximize_2d(value, derivs, [mu, lambda.ln()], NewtonOptions::default())?;
    Ok((p[0], p[1].exp(), f))
}

pub(crate) fn init(model: &GlmmModel, data: &GlmmData) -> VariationalState {
    let d = model.covariates.len();
    let stats = Stats::new(model, data);
    let mu = stats
        .y_tot
        .iter()
        .map(|y| (y / data.n.max(1) as f64 + 0.5).ln())
        .collect();
    VariationalState {
        globals: GlobalGaussianFactors {
            means: vec![0.0; d + 2],
            sds: vec![0.01; d + 2],
        },
        locals: LocalFactors::Gaussian {
            mu,
            lambda: vec![0.1; data.m],
        },
    }
}

fn precision_mean(g: &GlobalGaussianFactors) -> f64 {
    let r = g.means.len() - 1;
    (-g.means[r] + 0.5 * g.sds[r] * g.sds[r]).exp()
}

fn gaussian_prior_and_entropy(m: f64, s: f64, tau: f64) -> f64 {
    -0.5 * (LN_2PI + 2.0 * tau.ln()) - (m * m + s * s) / (2.0 * tau * tau) + 0.5 * (LN_2PI + 1.0) + s.ln()
}

pub(crate) fn elbo(stats: &Stats, g: &GlobalGaussianFactors, mu: &[f64], lambda: &[f64]) -> Result<f64> {
    let dim = g.means.len();
    let mut v: f64 = (0..dim)
        .map(|c| gaussian_prior_and_entropy(g.means[c], g.sds[c], stats.prior_sds[c]))
        .sum();
    v += (0..dim - 1).map(|c| g.means[c] * stats.lin[c]).sum::<f64>() - stats.log_fact;
    let eta = stats.expected_log_rates(g);
    let sums = stats.group_rate_sums(&eta);
    let a = precision_mean(g);
    let m_rho = g.means[dim - 1];
    for i in 0..stats.groups() {
        let (u, l) = (mu[i], lambda[i]);
        v += stats.y_tot[i] * u - (u + 0.5 * l).exp() * sums[i];
        v += -0.5 * m_rho - 0.5 * a * (u * u + l) + 0.5 + 0.5 * l.ln();
    }
    if !v.is_finite() {
        let bad = eta.iter().position(|e| !e.is_finite() || e.exp().is_infinite());
        return Err(Error::non_finite(format!(
            "GLMM ELBO (first overflowing log rate at observation {bad:?})"
        )));
    }
    Ok(v)
}

pub(crate) struct Sweep<'a> {
    stats: Stats<'a>,
    rest: Vec<f64>,
}

impl<'a> Sweep<'a> {
    pub(crate) fn new(model: &GlmmModel, data: &'a GlmmData) -> Result<Self> {
        let stats = Stats::new(model, data);
        Ok(Sweep {
            rest: vec![0.0; data.m * data.n],
            stats,
        })
    }

    fn update_coefficient(
        &mut self,
        c: usize,
        g: &mut GlobalGaussianFactors,
        mu: &[f64],
        lambda: &[f64],
    ) -> Result<()> {
        let st = &self.stats;
        let n = st.obs();
        let eta = st.expected_log_rates(g);
        let (m_old, s_old) = (g.means[c], g.sds[c]);
        for (o, r) in self.rest.iter_mut().enumerate() {
            let i = o / n;
            let x = st.covariate(o, c);
            *r = eta[o] - m_old * x - 0.5 * (s_old * x).powi(2) + mu[i] + 0.5 * lambda[i];
        }
        let rest = &self.rest;
        let lin = st.lin[c];
        let tau2 = st.prior_sds[c].powi(2);
        let value = |p: [f64; 2]| {
            let s2 = (2.0 * p[1]).exp();
            let t: f64 = rest
                .iter()
                .enumerate()
                .map(|(o, r)| {
                    let x = st.covariate(o, c);
                    (r + p[0] * x + 0.5 * s2 * x * x).exp()
                })
                .sum();
            p[0] * lin - t - (p[0] * p[0] + s2) / (2.0 * tau2) + p[1]
        };
        let derivs = |p: [f64; 2]| {
            let s2 = (2.0 * p[1]).exp();
            let (mut t, mut tm, mut tl, mut tmm, mut tml, mut tll) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (o, r) in rest.iter().enumerate() {
                let x = st.covariate(o, c);
                let x2 = x * x;
                let e = (r + p[0] * x + 0.5 * s2 * x2).exp();
                t += e;
                tm += e * x;
                tl += e * s2 * x2;
                tmm += e * x2;
                tml += e * s2 * x2 * x;
                tll += e * (s2 * s2 * x2 * x2 + 2.0 * s2 * x2);
            }
            let f = p[0] * lin - t - (p[0] * p[0] + s2) / (2.0 * tau2) + p[1];
            (
                f,
                [lin - tm - p[0] / tau2, -tl - s2 / tau2 + 1.0],
                [-tmm - 1.0 / tau2, -tml, -tll - 2.0 * s2 / tau2],
            )
        };
        let (p, _, _) =
            maximize_2d(value, derivs, [m_old, s_old.ln()], NewtonOptions::default()).map_err(|e| annotate(e, c))?;
        g.means[c] = p[0];
        g.sds[c] = p[1].exp();
        Ok(())
    }

    fn update_log_variance(&self, g: &mut GlobalGaussianFactors, mu: &[f64], lambda: &[f64]) -> Result<()> {
        let r = g.means.len() - 1;
        let groups = self.stats.groups() as f64;
        let half_c: f64 = 0.5 * mu.iter().zip(lambda).map(|(u, l)| u * u + l).sum::<f64>();
        let tau2 = self.stats.prior_sds[r].powi(2);
        let value = |p: [f64; 2]| {
            let s2 = (2.0 * p[1]).exp();
            -0.5 * groups * p[0] - half_c * (-p[0] + 0.5 * s2).exp() - (p[0] * p[0] + s2) / (2.0 * tau2) + p[1]
        };
        let derivs = |p: [f64; 2]| {
            let s2 = (2.0 * p[1]).exp();
            let e = half_c * (-p[0] + 0.5 * s2).exp();
            let f = -0.5 * groups * p[0] - e - (p[0] * p[0] + s2) / (2.0 * tau2) + p[1];
            (
                f,
                [-0.5 * groups + e - p[0] / tau2, -e * s2 - s2 / tau2 + 1.0],
                [-e - 1.0 / tau2, e * s2, -e * s2 * s2 - 2.0 * e * s2 - 2.0 * s2 / tau2],
            )
        };
        let (p, _, _) = maximize_2d(value, derivs, [g.means[r], g.sds[r].ln()], NewtonOptions::default())
            .map_err(|e| annotate(e, r))?;
        g.means[r] = p[0];
        g.sds[r] = p[1].exp();
        Ok(())
    }
}

fn annotate(e: Error, coord: usize) -> Error {
    match e {
        Error::NewtonFailure(msg) => Error::NewtonFailure(format!("global coordinate {coord}: {msg}")),
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("global coordinate {coord}: {context}"),
        },
        other => other,
    }
}

impl Sweeper for Sweep<'_> {
    fn sweep(&mut self, g: &mut GlobalGaussianFactors, locals: &mut LocalFactors) -> Result<()> {
        let LocalFactors::Gaussian { mu, lambda } = locals else {
            unreachable!("checked by fit_vb")
        };
        let dim = g.means.len();
        let a = precision_mean(g);
        let sums = self.stats.group_rate_sums(&self.stats.expected_log_rates(g));
        for i in 0..self.stats.groups() {
            let (u, l, _) = local_newton(self.stats.y_tot[i], sums[i], a, mu[i], lambda[i]).map_err(|e| match e {
                Error::NewtonFailure(msg) => Error::NewtonFailure(format!("group {i}: {msg}")),
                other => other,
            })?;
            mu[i] = u;
            lambda[i] = l;
        }
        for c in 0..dim - 1 {
            self.update_coefficient(c, g, mu, lambda)?;
        }
        // exact line search along (β_0 + δ, μ_i − δ)
        let a = precision_mean(g);
        let tau2 = self.stats.prior_sds[0].powi(2);
        let delta = (a * mu.iter().sum::<f64>() - g.means[0] / tau2) / (a * mu.len() as f64 + 1.0 / tau2);
        g.means[0] += delta;
        for u in mu.iter_mut() {
            *u -= delta;
        }
        self.update_log_variance(g, mu, lambda)
    }

    fn elbo(&mut self, g: &GlobalGaussianFactors, locals: &LocalFactors) -> Result<f64> {
        let LocalFactors::Gaussian { mu, lambda } = locals else {
            unreachable!("checked by fit_vb")
        };
        elbo(&self.stats, g, mu, lambda)
    }
}
