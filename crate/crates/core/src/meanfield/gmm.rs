//! CAVI for the unit-variance Gaussian mixture with a normal prior on each
//! component mean. Both updates are closed form.

use super::{GlobalGaussianFactors, LocalFactors, Sweeper, VariationalState};
use crate::error::Result;
use crate::models::GmmModel;
use crate::numeric::special::LN_2PI;
use crate::numeric::stats::quantile;

pub(crate) fn init(model: &GmmModel, x: &[f64]) -> VariationalState {
    let k = model.k;
    let means = if x.is_empty() {
        vec![0.0; k]
    } else {
        (1..=k).map(|j| quantile(x, j as f64 / (k + 1) as f64)).collect()
    };
    VariationalState {
        globals: GlobalGaussianFactors {
            means,
            sds: vec![1.0; k],
        },
        locals: LocalFactors::uniform(x.len(), k),
    }
}

pub(crate) fn elbo(model: &GmmModel, x: &[f64], g: &GlobalGaussianFactors, r: &[f64]) -> f64 {
    let k = model.k;
    let s0sq = model.prior_mean_sd * model.prior_mean_sd;
    let mut v = 0.0;
    for j in 0..k {
        let (m, s) = (g.means[j], g.sds[j]);
        // prior cross-entropy plus factor entropy
        v += -0.5 * (LN_2PI + s0sq.ln()) - (m * m + s * s) / (2.0 * s0sq);
        v += 0.5 * (LN_2PI + 1.0) + s.ln();
    }
    let log_k = (k as f64).ln();
    for (i, &xi) in x.iter().enumerate() {
        let row = &r[i * k..(i + 1) * k];
        for j in 0..k {
            let rij = row[j];
            if rij > 0.0 {
                let (m, s) = (g.means[j], g.sds[j]);
                let ell = -0.5 * LN_2PI - 0.5 * ((xi - m).powi(2) + s * s);
                v += rij * (ell - log_k - rij.ln());
            }
        }
    }
    v
}

/// `r_ik ∝ exp(m_k x_i - (m_k² + s_k²)/2)`.
pub(crate) fn update_locals(x: &[f64], g: &GlobalGaussianFactors, r: &mut [f64]) {
    let k = g.means.len();
    let offs: Vec<f64> = (0..k)
        .map(|j| -0.5 * (g.means[j] * g.means[j] + g.sds[j] * g.sds[j]))
        .collect();
    for (i, &xi) in x.iter().enumerate() {
        let row = &mut r[i * k..(i + 1) * k];
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            row[j] = g.means[j] * xi + offs[j];
            max = max.max(row[j]);
        }
        softmax_in_place(row, max);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], max: f64) {
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Conjugate normal update: `s_k² = 1/(1/s0² + N_k)`, `m_k = s_k² Σ_i r_ik x_i`.
pub(crate) fn update_globals(model: &GmmModel, x: &[f64], r: &[f64], g: &mut GlobalGaussianFactors) {
    let k = model.k;
    let mut nk = vec![0.0; k];
    let mut sx = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..k {
            let rij = r[i * k + j];
            nk[j] += rij;
            sx[j] += rij * xi;
        }
    }
    let prec0 = 1.0 / (model.prior_mean_sd * model.prior_mean_sd);
    for j in 0..k {
        let var = 1.0 / (prec0 + nk[j]);
        g.means[j] = var * sx[j];
        g.sds[j] = var.sqrt();
    }
}

pub(crate) struct Sweep<'a> {
    model: &'a GmmModel,
    x: &'a [f64],
}

impl<'a> Sweep<'a> {
    pub(crate) fn new(model: &'a GmmModel, x: &'a [f64]) -> Self {
        Sweep { model, x }
    }
}

impl Sweeper for Sweep<'_> {
    fn sweep(&mut self, globals: &mut GlobalGaussianFactors, locals: &mut LocalFactors) -> Result<()> {
        let LocalFactors::Responsibilities { r, .. } = locals else {
            unreachable!("checked by fit_vb")
        };
        update_locals(self.x, globals, r);
        update_globals(self.model, self.x, r, globals);
        Ok(())
    }

    fn elbo(&mut self, globals: &GlobalGaussianFactors, locals: &LocalFactors) -> Result<f64> {
        let (_, r) = locals.responsibilities().expect("checked by fit_vb");
        Ok(elbo(self.model, self.x, globals, r))
    }
}
