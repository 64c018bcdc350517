//! CAVI for the stochastic block model.
//!
//! Expectations of `softplus(ν)` and of `log Σ_a exp(ω_a)` under Gaussian
//! factors have no closed form; both use a fixed Gauss–Hermite rule (tensor
//! product over the `K - 1` free ω coordinates). Node responsibilities are
//! updated sequentially so each node sees its neighbours' latest values.

use super::gmm::softmax_in_place;
use super::{GlobalGaussianFactors, LocalFactors, Sweeper, VariationalState};
use crate::error::{Error, Result};
use crate::models::{SbmData, SbmModel};
use crate::numeric::optim::{maximize_2d, NewtonOptions};
use crate::numeric::quadrature::GaussHermite;
use crate::numeric::special::{log_sum_exp, sigmoid, softplus, LN_2PI};

pub const GH_ORDER: usize = 21;
/// Tensor quadrature over `K - 1` dimensions grows as `21^(K-1)`.
pub const MAX_VB_BLOCKS: usize = 4;

const INIT_SMOOTHING: f64 = 0.1;
const INIT_SD: f64 = 0.1;

/// Soft block statistics: `N_a = Σ_i r_ia`, `O_ab = Σ_i Σ_{j~i} r_ia r_jb`,
/// `P_ab = Σ_i Σ_{j≠i} r_ia r_jb`. `O` and `P` are over ordered pairs.
pub(crate) struct SoftCounts {
    pub n_a: Vec<f64>,
    pub o_ab: Vec<f64>,
    pub p_ab: Vec<f64>,
}

pub(crate) struct Context<'a> {
    pub model: &'a SbmModel,
    pub data: &'a SbmData,
    pub nbrs: Vec<Vec<usize>>,
    gh: GaussHermite,
}

/// Gaussian moments of a convex link needed by the factor Newton step:
/// `E f, E f', E[f' z], E f'', E[f'' z], E[f'' z²]` at `x = m + s z`.
#[derive(Debug, Clone, Copy, Default)]
struct LinkMoments {
    f: f64,
    d1: f64,
    d1z: f64,
    d2: f64,
    d2z: f64,
    d2zz: f64,
}

impl<'a> Context<'a> {
    pub(crate) fn new(model: &'a SbmModel, data: &'a SbmData) -> Result<Self> {
        if data.n != model.n {
            return Err(Error::Dimension(format!(
                "sbm model has n={} but data has {} nodes",
                model.n, data.n
            )));
        }
        Ok(Context {
            model,
            data,
            nbrs: data.neighbors(),
            gh: GaussHermite::new(GH_ORDER),
        })
    }

    pub(crate) fn k(&self) -> usize {
        self.model.k
    }

    pub(crate) fn counts(&self, r: &[f64]) -> SoftCounts {
        let k = self.k();
        let mut n_a = vec![0.0; k];
        let mut o_ab = vec![0.0; k * k];
        let mut diag = vec![0.0; k * k];
        let mut s = vec![0.0; k];
        for i in 0..self.data.n {
            let ri = &r[i * k..(i + 1) * k];
            s.iter_mut().for_each(|v| *v = 0.0);
            for &j in &self.nbrs[i] {
                for b in 0..k {
                    s[b] += r[j * k + b];
                }
            }
            for a in 0..k {
                n_a[a] += ri[a];
                for b in 0..k {
                    o_ab[a * k + b] += ri[a] * s[b];
                    diag[a * k + b] += ri[a] * ri[b];
                }
            }
        }
        let p_ab = (0..k * k).map(|ab| n_a[ab / k] * n_a[ab % k] - diag[ab]).collect();
        SoftCounts { n_a, o_ab, p_ab }
    }

    /// Degree-quantile binning: nodes sorted by degree (ties by index) are
    /// cut into `K` equal runs.
    pub(crate) fn degree_bins(&self) -> Vec<usize> {
        let n = self.data.n;
        let k = self.k();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (self.nbrs[i].len(), i));
        let mut z = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            z[i] = (rank * k / n.max(1)).min(k - 1);
        }
        z
    }

    pub(crate) fn init(&self) -> Result<VariationalState> {
        let k = self.k();
        let z = self.degree_bins();
        let locals = LocalFactors::smoothed_one_hot(&z, k, INIT_SMOOTHING);
        let (_, r) = locals.responsibilities().unwrap();
        let theta = self.moment_theta(r);
        Ok(VariationalState {
            globals: GlobalGaussianFactors::concentrated(&theta, INIT_SD)?,
            locals,
        })
    }

    /// Plug-in globals from block frequencies, clipped away from the
    /// boundary.
    pub(crate) fn moment_theta(&self, r: &[f64]) -> Vec<f64> {
        let k = self.k();
        let c = self.counts(r);
        let mut theta = vec![0.0; self.model.global_dim()];
        let last = c.n_a[k - 1].max(0.5);
        for a in 0..k - 1 {
            theta[a] = (c.n_a[a].max(0.5) / last).ln();
        }
        for a in 0..k {
            for b in a..k {
                let p = if c.p_ab[a * k + b] > 0.0 {
                    (c.o_ab[a * k + b] / c.p_ab[a * k + b]).clamp(1e-3, 1.0 - 1e-3)
                } else {
                    0.5
                };
                theta[self.model.nu_index(a, b)] = (p / (1.0 - p)).ln();
            }
        }
        theta
    }

    /// Unpack global factors into `K`-vectors / `K×K` matrices of means
    /// and sds (ω_K fixed at 0 with sd 0).
    fn unpack(&self, g: &GlobalGaussianFactors) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = self.k();
        let mut om = vec![0.0; k];
        let mut os = vec![0.0; k];
        om[..k - 1].copy_from_slice(&g.means[..k - 1]);
        os[..k - 1].copy_from_slice(&g.sds[..k - 1]);
        let mut nm = vec![0.0; k * k];
        let mut ns = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                let idx = self.model.nu_index(a.min(b), a.max(b));
                nm[a * k + b] = g.means[idx];
                ns[a * k + b] = g.sds[idx];
            }
        }
        (om, os, nm, ns)
    }

    fn softplus_moments(&self, m: f64, s: f64) -> LinkMoments {
        let mut out = LinkMoments::default();
        for (&z, &w) in self.gh.nodes.iter().zip(&self.gh.weights) {
            let x = m + s * z;
            let p = sigmoid(x);
            let q = p * (1.0 - p);
            out.f += w * softplus(x);
            out.d1 += w * p;
            out.d1z += w * p * z;
            out.d2 += w * q;
            out.d2z += w * q * z;
            out.d2zz += w * q * z * z;
        }
        out
    }

    /// `E log Σ_a exp(ω_a)` with `ω_K = 0`, and the link moments for
    /// coordinate `coord` (an index below `K - 1`).
    fn lse_moments(&self, om: &[f64], os: &[f64], coord: usize) -> LinkMoments {
        let k = self.k();
        let free = k - 1;
        let q = self.gh.nodes.len();
        let mut idx = vec![0usize; free];
        let mut w_vec = vec![0.0; k];
        let mut out = LinkMoments::default();
        loop {
            let mut w = 1.0;
            for a in 0..free {
                w *= self.gh.weights[idx[a]];
                w_vec[a] = om[a] + os[a] * self.gh.nodes[idx[a]];
            }
            w_vec[free] = 0.0;
            let l = log_sum_exp(&w_vec);
            let p = (w_vec[coord] - l).exp();
            let z = self.gh.nodes[idx[coord]];
            let pq = p * (1.0 - p);
            out.f += w * l;
            out.d1 += w * p;
            out.d1z += w * p * z;
            out.d2 += w * pq;
            out.d2z += w * pq * z;
            out.d2zz += w * pq * z * z;
            let mut pos = 0;
            loop {
                if pos == free {
                    return out;
                }
                idx[pos] += 1;
                if idx[pos] < q {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }

    fn expected_lse(&self, om: &[f64], os: &[f64]) -> f64 {
        if self.k() == 1 {
            return 0.0;
        }
        self.lse_moments(om, os, 0).f
    }

    pub(crate) fn elbo(&self, g: &GlobalGaussianFactors, r: &[f64]) -> f64 {
        let k = self.k();
        let tau2 = self.model.prior_sd * self.model.prior_sd;
        let mut v: f64 = g
            .means
            .iter()
            .zip(&g.sds)
            .map(|(&m, &s)| {
                -0.5 * (LN_2PI + tau2.ln()) - (m * m + s * s) / (2.0 * tau2) + 0.5 * (LN_2PI + 1.0) + s.ln()
            })
            .sum();
        let (om, os, nm, ns) = self.unpack(g);
        let c = self.counts(r);
        v += (0..k).map(|a| c.n_a[a] * om[a]).sum::<f64>() - self.data.n as f64 * self.expected_lse(&om, &os);
        for a in 0..k {
            for b in 0..k {
                let ab = a * k + b;
                let esp = self.softplus_moments(nm[ab], ns[ab]).f;
                v += 0.5 * (c.o_ab[ab] * nm[ab] - c.p_ab[ab] * esp);
            }
        }
        v + entropy(r)
    }

    /// Complete-data objective at point-mass globals, `E_r log p(x, z|θ) + H(r)`.
    pub(crate) fn point_objective(&self, theta: &[f64], r: &[f64]) -> f64 {
        let k = self.k();
        let p = self.model.unpack(theta);
        let log_pi = p.log_pi();
        let c = self.counts(r);
        let mut v: f64 = (0..k).map(|a| c.n_a[a] * log_pi[a]).sum();
        for ab in 0..k * k {
            v += 0.5 * (c.o_ab[ab] * p.nu[ab] - c.p_ab[ab] * softplus(p.nu[ab]));
        }
        v + entropy(r)
    }

    /// One sequential pass over nodes; `eomega`, `enu`, `esp` are the
    /// expected ω, ν and softplus(ν) (`K`-vector and `K×K` matrices).
    pub(crate) fn local_sweep(&self, r: &mut [f64], eomega: &[f64], enu: &[f64], esp: &[f64]) {
        let k = self.k();
        let mut n_b = vec![0.0; k];
        for row in r.chunks(k) {
            for b in 0..k {
                n_b[b] += row[b];
            }
        }
        let mut s = vec![0.0; k];
        let mut logit = vec![0.0; k];
        for i in 0..self.data.n {
            s.iter_mut().for_each(|v| *v = 0.0);
            for &j in &self.nbrs[i] {
                for b in 0..k {
                    s[b] += r[j * k + b];
                }
            }
            let row = &mut r[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for a in 0..k {
                let mut l = eomega[a];
                for b in 0..k {
                    l += s[b] * enu[a * k + b] - (n_b[b] - row[b]) * esp[a * k + b];
                }
                logit[a] = l;
                max = max.max(l);
            }
            for a in 0..k {
                n_b[a] -= row[a];
            }
            row.copy_from_slice(&logit);
            softmax_in_place(row, max);
            for a in 0..k {
                n_b[a] += row[a];
            }
        }
    }

    /// Hard-assignment analogue of [`Self::local_sweep`] at point globals;
    /// returns whether any label changed.
    pub(crate) fn icm_pass(&self, z: &mut [usize], log_pi: &[f64], nu: &[f64]) -> bool {
        let k = self.k();
        let mut n_b = vec![0.0; k];
        for &a in z.iter() {
            n_b[a] += 1.0;
        }
        let sp: Vec<f64> = nu.iter().map(|&v| softplus(v)).collect();
        let mut s = vec![0.0; k];
        let mut changed = false;
        for i in 0..self.data.n {
            s.iter_mut().for_each(|v| *v = 0.0);
            for &j in &self.nbrs[i] {
                s[z[j]] += 1.0;
            }
            n_b[z[i]] -= 1.0;
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..k {
                let mut l = log_pi[a];
                for b in 0..k {
                    l += s[b] * nu[a * k + b] - n_b[b] * sp[a * k + b];
                }
                if l > best.0 {
                    best = (l, a);
                }
            }
            if best.1 != z[i] {
                changed = true;
                z[i] = best.1;
            }
            n_b[z[i]] += 1.0;
        }
        changed
    }

    fn factor_newton(
        &self,
        c: f64,
        d: f64,
        start: (f64, f64),
        moments: impl Fn(f64, f64) -> LinkMoments,
    ) -> Result<(f64, f64)> {
        let tau2 = self.model.prior_sd * self.model.prior_sd;
        let value = |p: [f64; 2]| {
            let s = p[1].exp();
            let mo = moments(p[0], s);
            c * p[0] - d * mo.f - (p[0] * p[0] + s * s) / (2.0 * tau2) + p[1]
        };
        let derivs = |p: [f64; 2]| {
            let s = p[1].exp();
            let mo = moments(p[0], s);
            let f = c * p[0] - d * mo.f - (p[0] * p[0] + s * s) / (2.0 * tau2) + p[1];
            let g_l = s * mo.d1z;
            (
                f,
                [c - d * mo.d1 - p[0] / tau2, -d * g_l - s * s / tau2 + 1.0],
                [
                    -d * mo.d2 - 1.0 / tau2,
                    -d * s * mo.d2z,
                    -d * (g_l + s * s * mo.d2zz) - 2.0 * s * s / tau2,
                ],
            )
        };
        let (p, _, _) = maximize_2d(value, derivs, [start.0, start.1.ln()], NewtonOptions::default())?;
        Ok((p[0], p[1].exp()))
    }

    pub(crate) fn update_globals(&self, g: &mut GlobalGaussianFactors, r: &[f64]) -> Result<()> {
        let k = self.k();
        let c = self.counts(r);
        let n = self.data.n as f64;
        for a in 0..k - 1 {
            let (om, os, _, _) = self.unpack(g);
            let (m, s) = self
                .factor_newton(c.n_a[a], n, (g.means[a], g.sds[a]), |m, s| {
                    let mut om2 = om.clone();
                    let mut os2 = os.clone();
                    om2[a] = m;
                    os2[a] = s;
                    self.lse_moments(&om2, &os2, a)
                })
                .map_err(|e| annotate(e, &format!("omega{}", a + 1)))?;
            g.means[a] = m;
            g.sds[a] = s;
        }
        for a in 0..k {
            for b in a..k {
                let idx = self.model.nu_index(a, b);
                let (cc, dd) = if a == b {
                    (0.5 * c.o_ab[a * k + a], 0.5 * c.p_ab[a * k + a])
                } else {
                    (c.o_ab[a * k + b], c.p_ab[a * k + b])
                };
                let (m, s) = self
                    .factor_newton(cc, dd, (g.means[idx], g.sds[idx]), |m, s| self.softplus_moments(m, s))
                    .map_err(|e| annotate(e, &format!("nu{}{}", a + 1, b + 1)))?;
                g.means[idx] = m;
                g.sds[idx] = s;
            }
        }
        Ok(())
    }

    pub(crate) fn sweeper(self) -> Result<Context<'a>> {
        if self.k() > MAX_VB_BLOCKS {
            return Err(Error::Unsupported {
                model: "sbm",
                what: format!("mean-field fit limited to K <= {MAX_VB_BLOCKS} (tensor quadrature over K-1 dimensions)"),
            });
        }
        Ok(self)
    }
}

fn annotate(e: Error, coord: &str) -> Error {
    match e {
        Error::NewtonFailure(msg) => Error::NewtonFailure(format!("{coord}: {msg}")),
        other => other,
    }
}

pub(crate) fn entropy(r: &[f64]) -> f64 {
    -r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

impl Sweeper for Context<'_> {
    fn sweep(&mut self, g: &mut GlobalGaussianFactors, locals: &mut LocalFactors) -> Result<()> {
        let LocalFactors::Responsibilities { r, .. } = locals else {
            unreachable!("checked by fit_vb")
        };
        let k = self.k();
        let (om, _, nm, ns) = self.unpack(g);
        let esp: Vec<f64> = (0..k * k).map(|ab| self.softplus_moments(nm[ab], ns[ab]).f).collect();
        self.local_sweep(r, &om, &nm, &esp);
        self.update_globals(g, r)
    }

    fn elbo(&mut self, g: &GlobalGaussianFactors, locals: &LocalFactors) -> Result<f64> {
        let (_, r) = locals.responsibilities().expect("checked by fit_vb");
        Ok(Context::elbo(self, g, r))
    }
}
