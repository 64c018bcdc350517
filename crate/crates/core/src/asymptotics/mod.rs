//! Limiting objects implied by the variational Bernstein–von Mises theory
//! and the statistical checks that compare replicated fits against them.
//!
//! Sign convention: `V` is the positive curvature `-E[D² m]`, so the limit
//! of `δ_n^{-1}(θ − θ0)` under the ideal posterior is `N(Δ, V^{-1})` and
//! the mean-field limit is `N(Δ, V'^{-1})` with `V' = diag(V)`.

mod align;
mod checks;

pub use align::{align_estimate, best_permutation, hungarian, permutation_cost, permute_sds};
pub use checks::*;

use crate::error::{Error, Result};
use crate::models::{gmm, CovariateLaw, ModelInstance};
use crate::numeric::optim::fd_gradient_hessian;
use crate::rng::rng_from_seed;
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Per-coordinate rate `δ_n` at the model's size knob.
///
/// * GMM: `1/√n`.
/// * GLMM: `1/√m` for β_0 and σ², `1/√(mn)` for β_1.
/// * SBM: `1/√n` for ω, `1/√(n²ρ_n)` for ν, with `ρ_n = (n−1)/n · Σ π_a π_b H_ab`
///   the expected degree over `n`.
pub fn rate_vector(model: &ModelInstance, theta0: &[f64]) -> Result<Vec<f64>> {
    model.check_theta(theta0)?;
    let size = model.size();
    if size == 0 {
        return Err(Error::InvalidArgument("rates need a positive sample size".into()));
    }
    let s = size as f64;
    Ok(match model {
        ModelInstance::Gmm(m) => vec![1.0 / s.sqrt(); m.k],
        ModelInstance::Glmm(m) => {
            let d = m.covariates.len();
            let mut v = vec![1.0 / s.sqrt()];
            v.extend(std::iter::repeat(1.0 / (s * m.n as f64).sqrt()).take(d));
            v.push(1.0 / s.sqrt());
            v
        }
        ModelInstance::Sbm(m) => {
            let rho = (s - 1.0) / s * m.edge_density(theta0);
            let mut v = vec![1.0 / s.sqrt(); m.k - 1];
            v.extend(std::iter::repeat(1.0 / (s * s * rho).sqrt()).take(m.global_dim() - (m.k - 1)));
            v
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticPrediction {
    pub coords: Vec<String>,
    /// `δ_n` at the size the prediction was made for.
    pub delta_n: Vec<f64>,
    pub center: Vec<f64>,
    /// `V`, column-major.
    pub precision: Vec<f64>,
    /// Diagonal of `V'`, equal to the diagonal of `V`.
    pub v_prime: Vec<f64>,
    /// Covariance of the limit of `δ_n^{-1}(θ̂ − θ0)`, column-major.
    pub sampling_cov: Vec<f64>,
}

impl AsymptoticPrediction {
    pub fn new(
        coords: Vec<String>,
        delta_n: Vec<f64>,
        center: Vec<f64>,
        precision: DMatrix<f64>,
        sampling_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = center.len();
        if precision.nrows() != d || sampling_cov.nrows() != d || coords.len() != d || delta_n.len() != d {
            return Err(Error::Dimension("prediction components disagree".into()));
        }
        if precision.clone().cholesky().is_none() {
            return Err(Error::NotSpd("limit precision V".into()));
        }
        let v_prime = (0..d).map(|i| precision[(i, i)]).collect();
        Ok(AsymptoticPrediction {
            coords,
            delta_n,
            center,
            precision: precision.as_slice().to_vec(),
            v_prime,
            sampling_cov: sampling_cov.as_slice().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn precision_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim(), self.dim(), &self.precision)
    }

    pub fn sampling_cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim(), self.dim(), &self.sampling_cov)
    }

    /// Mean-field limit variance `1 / V'_ii` on the rescaled axis.
    pub fn mean_field_variances(&self) -> Vec<f64> {
        self.v_prime.iter().map(|v| 1.0 / v).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichEstimate {
    pub prediction: AsymptoticPrediction,
    /// `A = -E[D² m]`, row-major.
    pub a: Vec<f64>,
    /// `B = E[∇m ∇mᵀ]`, row-major.
    pub b: Vec<f64>,
    pub a_se: Vec<f64>,
    pub b_se: Vec<f64>,
    /// Largest relative change of `A` when the step is halved.
    pub richardson_rel_change: f64,
}

/// Largest Monte Carlo standard error allowed, relative to `√(A_ii A_jj)`.
pub const SANDWICH_SE_LIMIT: f64 = 0.05;

/// Default finite-difference step: `1e-4 · max(1, |θ0|_∞)`.
pub fn default_fd_step(theta0: &[f64]) -> f64 {
    1e-4 * theta0.iter().fold(1.0f64, |a, t| a.max(t.abs()))
}

/// Monte Carlo sandwich for the mixture: `A` from central second
/// differences of the per-datum log likelihood, `B` from outer products of
/// central first differences, both averaged over draws from `P_{μ0}`.
pub fn gmm_sandwich(
    model: &ModelInstance,
    theta0: &[f64],
    mc_samples: usize,
    fd_step: f64,
    seed: u64,
) -> Result<SandwichEstimate> {
    let ModelInstance::Gmm(gm) = model else {
        return Err(Error::Unsupported {
            model: model.name(),
            what: "sandwich variance is implemented for the mixture".into(),
        });
    };
    model.check_theta(theta0)?;
    if mc_samples < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1e4 Monte Carlo draws, got {mc_samples}"
        )));
    }
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("fd_step must be positive".into()));
    }
    let k = gm.k;
    let mut rng = rng_from_seed(seed);
    let mut a_acc = Welford::new(k * k);
    let mut a_half = vec![0.0; k * k];
    let mut b_acc = Welford::new(k * k);
    for _ in 0..mc_samples {
        let c = rng.random_range(0..k);
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = theta0[c] + z;
        let m = |mu: &[f64]| gmm::datum_loglik(mu, x);
        let (g, h) = fd_gradient_hessian(theta0, fd_step, m);
        let (_, h2) = fd_gradient_hessian(theta0, 0.5 * fd_step, m);
        let neg_h: Vec<f64> = h.iter().map(|v| -v).collect();
        a_acc.push(&neg_h);
        for (acc, v) in a_half.iter_mut().zip(&h2) {
            *acc -= v;
        }
        let outer: Vec<f64> = (0..k * k).map(|ij| g[ij / k] * g[ij % k]).collect();
        b_acc.push(&outer);
    }
    let nf = mc_samples as f64;
    let a = a_acc.mean.clone();
    let b = b_acc.mean.clone();
    let a_se = a_acc.standard_errors();
    let b_se = b_acc.standard_errors();
    for i in 0..k {
        for j in 0..k {
            let scale = (a[i * k + i] * a[j * k + j]).abs().sqrt();
            let se = a_se[i * k + j].max(b_se[i * k + j]);
            if se > SANDWICH_SE_LIMIT * scale {
                return Err(Error::MonteCarloError(format!(
                    "standard error {se:.3e} of entry ({i},{j}) exceeds {SANDWICH_SE_LIMIT} of {scale:.3e}"
                )));
            }
        }
    }
    let richardson_rel_change = a
        .iter()
        .zip(&a_half)
        .map(|(x, y)| (x - y / nf).abs() / x.abs().max(1e-12))
        .enumerate()
        .filter(|(ij, _)| a[*ij].abs() > 1e-8 * a[0].abs())
        .map(|(_, v)| v)
        .fold(0.0, f64::max);
    let am = DMatrix::from_row_slice(k, k, &a);
    let bm = DMatrix::from_row_slice(k, k, &b);
    let a_inv = am
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("sandwich A matrix".into()))?;
    let cov = &a_inv * bm * &a_inv;
    let cov = 0.5 * (&cov + cov.transpose());
    let delta = if gm.n > 0 {
        rate_vector(model, theta0)?
    } else {
        vec![1.0; k]
    };
    let prediction = AsymptoticPrediction::new(model.coord_names(), delta, theta0.to_vec(), am, cov)?;
    Ok(SandwichEstimate {
        prediction,
        a,
        b,
        a_se,
        b_se,
        richardson_rel_change,
    })
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn standard_errors(&self) -> Vec<f64> {
        self.m2.iter().map(|s| (s / (self.n - 1.0) / self.n).sqrt()).collect()
    }
}

/// Closed-form GLMM limits for independent covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmPrediction {
    pub v1: f64,
    pub v2: Vec<f64>,
    pub v3: f64,
    pub tau2: Vec<f64>,
    pub var_z1: f64,
    pub var_z2: Vec<f64>,
    pub var_z3: f64,
}

/// Evaluates the GLMM limit formulas. The scalar-covariate expressions use
/// `φ`, `φ'`, `φ''` of `X`; with independent coordinates the joint mgf
/// factorizes, and the per-coordinate forms follow by replacing `φ(β_1)`
/// with `Π_l φ_l(β_1l)` and `φ''(β_1)` with `φ''_k Π_{l≠k} φ_l`:
///
/// `τ²_k = e^{−σ²/2−β_0} φ_k / ((φ''_k φ_k − φ'_k²) Π_{l≠k} φ_l)`.
pub fn glmm_predicted_vars(beta0: f64, beta1: &[f64], sigma2: f64, laws: &[CovariateLaw]) -> Result<GlmmPrediction> {
    if beta1.len() != laws.len() {
        return Err(Error::Dimension(format!(
            "{} slopes for {} covariate laws",
            beta1.len(),
            laws.len()
        )));
    }
    if !(sigma2 > 0.0) || !beta0.is_finite() {
        return Err(Error::InvalidArgument("need finite beta0 and positive sigma2".into()));
    }
    let m: Vec<(f64, f64, f64)> = laws.iter().zip(beta1).map(|(l, &b)| l.mgf(b)).collect();
    let prod: f64 = m.iter().map(|t| t.0).product();
    let scale = (-beta0 + 0.5 * sigma2).exp();
    let mut v2 = Vec::with_capacity(m.len());
    let mut tau2 = Vec::with_capacity(m.len());
    for (k, &(phi, d1, d2)) in m.iter().enumerate() {
        let others: f64 = m
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != k)
            .map(|(_, t)| t.0)
            .product();
        v2.push(scale / (d2 * others));
        let denom = (d2 * phi - d1 * d1) * others;
        if !(denom > 0.0) {
            return Err(Error::Singular(format!(
                "covariate {k} has degenerate law (zero variance)"
            )));
        }
        tau2.push((-0.5 * sigma2 - beta0).exp() * phi / denom);
    }
    Ok(GlmmPrediction {
        v1: scale / prod,
        v2,
        v3: 2.0 * sigma2 * sigma2,
        var_z1: sigma2,
        var_z2: tau2.clone(),
        tau2,
        var_z3: 2.0 * sigma2 * sigma2,
    })
}

/// GLMM prediction on the natural `(β_0, β_1, σ²)` scale: the rescaled
/// estimator covariance is `diag(σ², τ², 2σ⁴)` and `V` its inverse.
pub fn glmm_prediction(model: &ModelInstance, theta0: &[f64]) -> Result<AsymptoticPrediction> {
    let ModelInstance::Glmm(gm) = model else {
        return Err(Error::Unsupported {
            model: model.name(),
            what: "glmm prediction".into(),
        });
    };
    model.check_theta(theta0)?;
    let d = gm.covariates.len();
    let sigma2 = theta0[d + 1].exp();
    let p = glmm_predicted_vars(theta0[0], &theta0[1..=d], sigma2, &gm.covariates)?;
    let mut var = vec![p.var_z1];
    var.extend(&p.tau2);
    var.push(p.var_z3);
    let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(var.clone()));
    let prec = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d + 2, var.iter().map(|v| 1.0 / v)));
    let mut center = theta0.to_vec();
    center[d + 1] = sigma2;
    let mut coords = model.coord_names();
    coords[d + 1] = "sigma2".into();
    let delta = if gm.m > 0 {
        rate_vector(model, theta0)?
    } else {
        vec![1.0; d + 2]
    };
    AsymptoticPrediction::new(coords, delta, center, prec, cov)
}
