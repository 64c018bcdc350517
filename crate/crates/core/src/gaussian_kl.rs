//! Closed-form Gaussian information geometry: KL divergence, entropy, the
//! KL projection onto diagonal covariances, and 1-D total variation.

use crate::error::{Error, Result};
use crate::numeric::quadrature::simpson;
use crate::numeric::special::{normal_pdf, LN_2PI};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

const SYMMETRY_TOL: f64 = 1e-12;

/// Multivariate normal with a validated SPD covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    diagonal: bool,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has length {d}, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("Gaussian parameters"));
        }
        let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSpd(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
        Ok(Gaussian {
            mean: DVector::from_vec(mean),
            cov,
            chol,
            diagonal,
        })
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NotSpd(format!("variance {v} is not positive")));
        }
        Gaussian::new(mean, DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn univariate(mean: f64, sd: f64) -> Result<Self> {
        Gaussian::diagonal(vec![mean], &[sd * sd])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.cov[(i, i)]).collect()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Marginal of coordinate `i`.
    pub fn marginal(&self, i: usize) -> Gaussian {
        Gaussian::univariate(self.mean[i], self.cov[(i, i)].sqrt()).expect("marginal of SPD is SPD")
    }
}

/// `KL(q0 || q1) = ½[tr(Σ₁⁻¹Σ₀) + (μ₁−μ₀)ᵀΣ₁⁻¹(μ₁−μ₀) − d + log det Σ₁ / det Σ₀]`.
pub fn kl_normal(q0: &Gaussian, q1: &Gaussian) -> Result<f64> {
    if q0.dim() != q1.dim() {
        return Err(Error::Dimension(format!(
            "KL between dimensions {} and {}",
            q0.dim(),
            q1.dim()
        )));
    }
    let d = q0.dim() as f64;
    let trace = q1.chol.solve(&q0.cov).trace();
    let diff = &q1.mean - &q0.mean;
    let maha = diff.dot(&q1.chol.solve(&diff));
    let kl = 0.5 * (trace + maha - d + q1.log_det() - q0.log_det());
    // Rounding can leave a -1e-16 residue at q0 = q1.
    Ok(kl.max(0.0))
}

/// Diagonal Gaussian minimizing `KL(q || target)`: keeps the mean and sets
/// each variance to `1 / (Σ⁻¹)_ii`. Diagonal targets come back unchanged.
pub fn diag_kl_projection(target: &Gaussian) -> Gaussian {
    let d = target.dim();
    if (0..d).all(|i| (0..d).all(|j| i == j || target.cov[(i, j)] == 0.0)) {
        return Gaussian::diagonal(target.mean.as_slice().to_vec(), &target.variances())
            .expect("target variances are positive");
    }
    let prec = target.precision();
    let vars: Vec<f64> = (0..target.dim()).map(|i| 1.0 / prec[(i, i)]).collect();
    Gaussian::diagonal(target.mean.as_slice().to_vec(), &vars).expect("precision diagonal is positive")
}

/// `½ log((2πe)^d det Σ)`, via the Cholesky factor.
pub fn entropy(g: &Gaussian) -> f64 {
    0.5 * (g.dim() as f64 * (LN_2PI + 1.0) + g.log_det())
}

/// Same quantity through the eigenvalues of Σ.
pub fn entropy_from_eigenvalues(g: &Gaussian) -> f64 {
    let eig = g.cov.clone().symmetric_eigen();
    let log_det: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
    0.5 * (g.dim() as f64 * (LN_2PI + 1.0) + log_det)
}

/// Number of Simpson intervals used by [`tv_normal_1d`] unless overridden.
pub const TV_DEFAULT_INTERVALS: usize = 20_000;

/// `½∫|q0 − q1|` by Simpson's rule over ±10 pooled sds.
pub fn tv_normal_1d(q0: (f64, f64), q1: (f64, f64), intervals: usize) -> f64 {
    let (m0, s0) = q0;
    let (m1, s1) = q1;
    let pooled = s0.max(s1);
    let lo = m0.min(m1) - 10.0 * pooled;
    let hi = m0.max(m1) + 10.0 * pooled;
    let v = 0.5
        * simpson(lo, hi, intervals, |x| {
            (normal_pdf(x, m0, s0) - normal_pdf(x, m1, s1)).abs()
        });
    v.clamp(0.0, 1.0)
}

/// Per-marginal TV between two Gaussians; the joint distance is reported as
/// the largest marginal value.
pub fn tv_per_marginal(q0: &Gaussian, q1: &Gaussian) -> Result<Vec<f64>> {
    if q0.dim() != q1.dim() {
        return Err(Error::Dimension("TV between different dimensions".into()));
    }
    Ok((0..q0.dim())
        .map(|i| {
            tv_normal_1d(
                (q0.mean[i], q0.cov[(i, i)].sqrt()),
                (q1.mean[i], q1.cov[(i, i)].sqrt()),
                TV_DEFAULT_INTERVALS,
            )
        })
        .collect())
}
