//! The VB ideal posterior `π*(θ|x) ∝ p(θ) exp(M_n(θ; x))` on a grid
//! (one or two global coordinates) and its mean-field KL projection.
//!
//! The grid is local: it is centred at the variational frequentist estimate
//! and spans a fixed number of curvature standard deviations, so for
//! mixtures it captures one labelling of the parameter.

use crate::error::{Error, Result};
use crate::gaussian_kl::Gaussian;
use crate::meanfield::{default_init, fit_vb, LocalFactors, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::models::{GlmmModel, ModelInstance, Observations};
use crate::numeric::optim::{fd_gradient_hessian, maximize, NewtonOptions, Objective};
use crate::numeric::special::{log_sum_exp, normal_pdf};
use crate::vfe::{default_vfe_init, fit_vfe, VariationalLoglik};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const DEFAULT_GRID_POINTS: usize = 401;
pub const DEFAULT_HALFWIDTH_SDS: f64 = 10.0;
/// Largest mass allowed in the boundary band of the grid.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-4;
/// Local maxima below this fraction of the peak density are ignored when
/// deciding whether `π*` is multimodal.
const MODE_HEIGHT_FRACTION: f64 = 1e-3;
const MAX_GRID_DIM: usize = 2;

/// `θ ↦ (log p(θ), M_n(θ))` for a fixed dataset.
pub trait ProfiledObjective {
    fn dim(&self) -> usize;
    fn log_prior(&self, theta: &[f64]) -> Result<f64>;
    /// `M_n(θ)`. Implementations may keep state from the previous call to
    /// warm-start their inner optimization.
    fn m_n(&mut self, theta: &[f64]) -> Result<f64>;
}

/// `M_n` of a model with at most two global coordinates.
pub struct ModelObjective<'a> {
    model: &'a ModelInstance,
    eval: VariationalLoglik<'a>,
    warm: Option<LocalFactors>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a ModelInstance, data: &'a Observations) -> Result<Self> {
        if model.global_dim() > MAX_GRID_DIM {
            return Err(Error::Unsupported {
                model: model.name(),
                what: format!(
                    "grid posterior needs at most {MAX_GRID_DIM} globals, got {}",
                    model.global_dim()
                ),
            });
        }
        Ok(ModelObjective {
            model,
            eval: VariationalLoglik::new(model, data)?,
            warm: None,
        })
    }
}

impl ProfiledObjective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.global_dim()
    }

    fn log_prior(&self, theta: &[f64]) -> Result<f64> {
        self.model.log_prior(theta)
    }

    fn m_n(&mut self, theta: &[f64]) -> Result<f64> {
        if let ModelInstance::Gmm(_) = self.model {
            return self.eval.value(theta);
        }
        let (v, locals) = self.eval.eval(theta, self.warm.as_ref())?;
        self.warm = Some(locals);
        Ok(v)
    }
}

/// One-dimensional slice of the GLMM through `log σ²` with the regression
/// coefficients held fixed.
pub struct GlmmSigmaSlice<'a> {
    glmm: &'a GlmmModel,
    eval: VariationalLoglik<'a>,
    beta: Vec<f64>,
    warm: Option<LocalFactors>,
}

impl<'a> GlmmSigmaSlice<'a> {
    pub fn new(model: &'a ModelInstance, data: &'a Observations, beta: Vec<f64>) -> Result<Self> {
        let ModelInstance::Glmm(glmm) = model else {
            return Err(Error::InvalidArgument("sigma slice needs a glmm model".into()));
        };
        if beta.len() != glmm.d() + 1 {
            return Err(Error::Dimension(format!(
                "{} coefficients for d = {}",
                beta.len(),
                glmm.d()
            )));
        }
        Ok(GlmmSigmaSlice {
            glmm,
            eval: VariationalLoglik::new(model, data)?,
            beta,
            warm: None,
        })
    }

    fn full(&self, log_sigma2: f64) -> Vec<f64> {
        let mut t = self.beta.clone();
        t.push(log_sigma2);
        t
    }
}

impl ProfiledObjective for GlmmSigmaSlice<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn log_prior(&self, theta: &[f64]) -> Result<f64> {
        let s = self.glmm.log_sigma2_prior_sd;
        Ok(crate::numeric::special::normal_logpdf(theta[0], 0.0, s))
    }

    fn m_n(&mut self, theta: &[f64]) -> Result<f64> {
        let (v, locals) = self.eval.eval(&self.full(theta[0]), self.warm.as_ref())?;
        self.warm = Some(locals);
        Ok(v)
    }
}

/// Uniform grid: `points` nodes per axis on `center ± halfwidth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: Vec<f64>,
    pub halfwidths: Vec<f64>,
    pub points: usize,
}

impl GridSpec {
    pub fn new(center: Vec<f64>, halfwidths: Vec<f64>, points: usize) -> Result<Self> {
        if center.is_empty() || center.len() > MAX_GRID_DIM || center.len() != halfwidths.len() {
            return Err(Error::Dimension(format!(
                "grid needs 1 or 2 axes with matching halfwidths, got {} and {}",
                center.len(),
                halfwidths.len()
            )));
        }
        if points < 3 {
            return Err(Error::InvalidArgument("grid needs at least 3 points per axis".into()));
        }
        if halfwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "grid center and halfwidths must be finite, halfwidths positive".into(),
            ));
        }
        Ok(GridSpec {
            center,
            halfwidths,
            points,
        })
    }

    /// Halfwidths of `halfwidth_sds` marginal standard deviations, taken from
    /// a finite-difference Hessian of `log p + M_n` at `center`.
    pub fn from_curvature(
        obj: &mut dyn ProfiledObjective,
        center: &[f64],
        halfwidth_sds: f64,
        points: usize,
    ) -> Result<Self> {
        let d = obj.dim();
        if center.len() != d {
            return Err(Error::Dimension("grid center does not match the objective".into()));
        }
        let mut sds = vec![1e-3; d];
        // second pass uses a step matched to the first-pass scale
        for _ in 0..2 {
            let step = 0.1 * sds.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut failure = None;
            let (_, h) = fd_gradient_hessian(center, step, |t| match log_target(obj, t) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let neg = DMatrix::from_row_slice(d, d, &h).map(|v| -v);
            let cov = neg
                .cholesky()
                .ok_or_else(|| Error::NotSpd("negative Hessian of log p + M_n at the grid center".into()))?
                .inverse();
            sds = (0..d).map(|i| cov[(i, i)].sqrt()).collect();
        }
        GridSpec::new(center.to_vec(), sds.iter().map(|s| halfwidth_sds * s).collect(), points)
    }

    /// Twice as fine: every existing node is kept.
    pub fn refined(&self) -> GridSpec {
        GridSpec {
            points: 2 * (self.points - 1) + 1,
            ..self.clone()
        }
    }

    pub fn axes(&self) -> Vec<Vec<f64>> {
        self.center
            .iter()
            .zip(&self.halfwidths)
            .map(|(c, h)| {
                let step = 2.0 * h / (self.points - 1) as f64;
                (0..self.points).map(|i| c - h + i as f64 * step).collect()
            })
            .collect()
    }
}

fn log_target(obj: &mut dyn ProfiledObjective, theta: &[f64]) -> Result<f64> {
    let v = obj.log_prior(theta)? + obj.m_n(theta)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(format!("log p + M_n at {theta:?}")))
    }
}

/// Unnormalized log density on a uniform grid, row-major with the last axis
/// fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub axes: Vec<Vec<f64>>,
    pub log_values: Vec<f64>,
    /// `log ∫ exp(log_values)`, by the equal-weight rule.
    pub log_normalizer: f64,
}

impl GridDensity {
    /// Builds and normalizes a density from log values at the nodes.
    pub fn from_log_values(axes: Vec<Vec<f64>>, log_values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_GRID_DIM || axes.iter().any(|a| a.len() < 3) {
            return Err(Error::Dimension(
                "grid density needs 1 or 2 axes of at least 3 nodes".into(),
            ));
        }
        let size: usize = axes.iter().map(|a| a.len()).product();
        if log_values.len() != size {
            return Err(Error::Dimension(format!(
                "{} log values for {size} nodes",
                log_values.len()
            )));
        }
        let mut g = GridDensity {
            axes,
            log_values,
            log_normalizer: 0.0,
        };
        g.log_normalizer = log_sum_exp(&g.log_values) + g.cell_volume().ln();
        if !g.log_normalizer.is_finite() {
            return Err(Error::non_finite("grid normalizer"));
        }
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn steps(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[1] - a[0]).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.steps().iter().product()
    }

    /// Multi-index of a flat node index.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        for a in (0..shape.len()).rev() {
            idx[a] = flat % shape[a];
            flat /= shape[a];
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat).iter().zip(&self.axes).map(|(&i, a)| a[i]).collect()
    }

    /// Probability mass of each cell; sums to one.
    pub fn masses(&self) -> Vec<f64> {
        let shift = self.log_normalizer - self.cell_volume().ln();
        self.log_values.iter().map(|v| (v - shift).exp()).collect()
    }

    /// Normalized density at each node.
    pub fn densities(&self) -> Vec<f64> {
        self.log_values
            .iter()
            .map(|v| (v - self.log_normalizer).exp())
            .collect()
    }

    /// Marginal mass per node of axis `axis`.
    pub fn marginal_masses(&self, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes[axis].len()];
        for (flat, m) in self.masses().into_iter().enumerate() {
            out[self.unravel(flat)[axis]] += m;
        }
        out
    }

    /// Marginal density of `axis`, linearly interpolated, zero off the grid.
    pub fn marginal_density_at(&self, axis: usize, x: f64) -> f64 {
        let a = &self.axes[axis];
        let h = a[1] - a[0];
        let pos = (x - a[0]) / h;
        if !(pos >= 0.0 && pos <= (a.len() - 1) as f64) {
            return 0.0;
        }
        let m = self.marginal_masses(axis);
        let i = (pos.floor() as usize).min(a.len() - 2);
        let t = pos - i as f64;
        ((1.0 - t) * m[i] + t * m[i + 1]) / h
    }

    /// `½ ∫ |p_axis − f|` by the grid rule.
    pub fn marginal_tv_to(&self, axis: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = self.steps()[axis];
        let m = self.marginal_masses(axis);
        let s: f64 = self.axes[axis]
            .iter()
            .zip(&m)
            .map(|(&x, &p)| (p / h - f(x)).abs())
            .sum();
        (0.5 * s * h).clamp(0.0, 1.0)
    }

    /// Per-marginal TV to a Gaussian of the same dimension.
    pub fn tv_to_gaussian(&self, g: &Gaussian) -> Result<Vec<f64>> {
        if g.dim() != self.dim() {
            return Err(Error::Dimension("gaussian and grid dimensions differ".into()));
        }
        let sds: Vec<f64> = g.variances().iter().map(|v| v.sqrt()).collect();
        Ok((0..self.dim())
            .map(|i| self.marginal_tv_to(i, |x| normal_pdf(x, g.mean()[i], sds[i])))
            .collect())
    }

    /// Mass in the outer twentieth of each axis (at least one node deep).
    pub fn boundary_mass(&self) -> f64 {
        let shape = self.shape();
        let depth: Vec<usize> = shape.iter().map(|&n| (n / 20).max(1)).collect();
        self.masses()
            .into_iter()
            .enumerate()
            .filter(|(flat, _)| {
                self.unravel(*flat)
                    .iter()
                    .zip(&shape)
                    .zip(&depth)
                    .any(|((&i, &n), &k)| i < k || i + k >= n)
            })
            .map(|(_, m)| m)
            .sum()
    }

    pub fn mode_index(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.log_values.iter().enumerate() {
            if *v > self.log_values[best] {
                best = i;
            }
        }
        best
    }

    /// Nodes strictly above all their neighbours and at least
    /// `MODE_HEIGHT_FRACTION` of the peak.
    pub fn local_maxima(&self) -> Vec<usize> {
        let shape = self.shape();
        let top = self.log_values[self.mode_index()];
        let floor = top + MODE_HEIGHT_FRACTION.ln();
        let mut out = Vec::new();
        for flat in 0..self.log_values.len() {
            let v = self.log_values[flat];
            if v < floor {
                continue;
            }
            let idx = self.unravel(flat);
            let mut is_max = true;
            for off in 0..3usize.pow(shape.len() as u32) {
                let mut o = off;
                let mut nb = 0usize;
                let mut valid = true;
                let mut centre = true;
                for (a, &n) in shape.iter().enumerate() {
                    let step = (o % 3) as isize - 1;
                    o /= 3;
                    centre &= step == 0;
                    let j = idx[a] as isize + step;
                    if j < 0 || j >= n as isize {
                        valid = false;
                        break;
                    }
                    nb = nb * n + j as usize;
                }
                if valid && !centre && self.log_values[nb] >= v {
                    is_max = false;
                    break;
                }
            }
            if is_max {
                out.push(flat);
            }
        }
        out
    }

    /// `theta1[,theta2],density` with normalized density.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("theta{i}")).collect();
        writeln!(w, "{},density", header.join(","))?;
        for (flat, p) in self.densities().into_iter().enumerate() {
            let node: Vec<String> = self.node(flat).iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{},{p:e}", node.join(","))?;
        }
        Ok(())
    }
}

/// Evaluates `log p(θ) + M_n(θ)` over the grid in row-major order, so each
/// inner problem is warm-started from its predecessor.
pub fn ideal_posterior(obj: &mut dyn ProfiledObjective, spec: &GridSpec) -> Result<GridDensity> {
    if spec.center.len() != obj.dim() {
        return Err(Error::Dimension(format!(
            "grid has {} axes, objective has {} coordinates",
            spec.center.len(),
            obj.dim()
        )));
    }
    let axes = spec.axes();
    let size: usize = axes.iter().map(|a| a.len()).product();
    let mut log_values = Vec::with_capacity(size);
    let mut theta = vec![0.0; axes.len()];
    for flat in 0..size {
        let mut rem = flat;
        for a in (0..axes.len()).rev() {
            theta[a] = axes[a][rem % axes[a].len()];
            rem /= axes[a].len();
        }
        log_values.push(log_target(obj, &theta)?);
    }
    let g = GridDensity::from_log_values(axes, log_values)?;
    let mass = g.boundary_mass();
    if mass > BOUNDARY_MASS_LIMIT {
        return Err(Error::GridTooCoarse {
            mass,
            limit: BOUNDARY_MASS_LIMIT,
        });
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldProjection {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// The target has more than one substantial mode, so the projection
    /// describes only the one it locked onto.
    pub multimodal_fit: bool,
    pub iterations: usize,
    pub converged: bool,
}

impl MeanFieldProjection {
    pub fn gaussian(&self) -> Gaussian {
        let vars: Vec<f64> = self.sds.iter().map(|s| s * s).collect();
        Gaussian::diagonal(self.means.clone(), &vars).expect("projection sds are positive")
    }
}

/// Grid-discretized `q ↦ H(q) + E_q[log π*]` over diagonal Gaussians,
/// parametrized by `(means, log sds)`. Expectations use the normalized
/// Gaussian weights at the nodes, so derivatives are those of the discrete
/// objective and follow from cumulants of the weight family.
struct ProjectionObjective<'a> {
    grid: &'a GridDensity,
    nodes: Vec<Vec<f64>>,
    f: Vec<f64>,
    min_sd: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> ProjectionObjective<'a> {
    fn new(grid: &'a GridDensity) -> Self {
        let top = grid.log_values[grid.mode_index()];
        ProjectionObjective {
            grid,
            nodes: (0..grid.log_values.len()).map(|i| grid.node(i)).collect(),
            f: grid.log_values.iter().map(|v| v - top).collect(),
            min_sd: grid.steps().iter().map(|h| 0.5 * h).collect(),
            lo: grid.axes.iter().map(|a| a[0]).collect(),
            hi: grid.axes.iter().map(|a| a[a.len() - 1]).collect(),
        }
    }

    fn feasible(&self, p: &[f64]) -> bool {
        let d = self.grid.dim();
        (0..d).all(|i| {
            let s = p[d + i].exp();
            p[i] > self.lo[i] && p[i] < self.hi[i] && s >= self.min_sd[i] && s.is_finite()
        })
    }

    /// Normalized weights and the per-node standardized coordinates.
    fn weights(&self, p: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.grid.dim();
        let z: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|x| (0..d).map(|i| (x[i] - p[i]) * (-p[d + i]).exp()).collect())
            .collect();
        let logw: Vec<f64> = z
            .iter()
            .map(|zi| -0.5 * zi.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let lse = log_sum_exp(&logw);
        (logw.iter().map(|l| (l - lse).exp()).collect(), z)
    }
}

impl Objective for ProjectionObjective<'_> {
    fn value(&mut self, p: &[f64]) -> f64 {
        if !self.feasible(p) {
            return f64::NEG_INFINITY;
        }
        let d = self.grid.dim();
        let (w, _) = self.weights(p);
        let ef: f64 = w.iter().zip(&self.f).map(|(a, b)| a * b).sum();
        p[d..].iter().sum::<f64>() + ef
    }

    fn derivatives(&mut self, p: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.grid.dim();
        let np = 2 * d;
        if !self.feasible(p) {
            return (f64::NEG_INFINITY, vec![0.0; np], vec![0.0; np * np]);
        }
        let (w, z) = self.weights(p);
        let s: Vec<f64> = (0..d).map(|i| p[d + i].exp()).collect();
        // first derivatives of the log weight: ∂/∂m_i = z_i/s_i, ∂/∂log s_i = z_i²
        let score = |zi: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; np];
            for i in 0..d {
                g[i] = zi[i] / s[i];
                g[d + i] = zi[i] * zi[i];
            }
            g
        };
        let mut fbar = 0.0;
        let mut gbar = vec![0.0; np];
        // within-coordinate second derivatives that vary over nodes
        let mut cross_bar = vec![0.0; d];
        let mut ls_bar = vec![0.0; d];
        for (k, zi) in z.iter().enumerate() {
            fbar += w[k] * self.f[k];
            for (a, v) in score(zi).into_iter().enumerate() {
                gbar[a] += w[k] * v;
            }
            for i in 0..d {
                cross_bar[i] += w[k] * (-2.0 * zi[i] / s[i]);
                ls_bar[i] += w[k] * (-2.0 * zi[i] * zi[i]);
            }
        }
        let mut grad = vec![0.0; np];
        let mut hess = vec![0.0; np * np];
        for (k, zi) in z.iter().enumerate() {
            let df = self.f[k] - fbar;
            let wf = w[k] * df;
            let g: Vec<f64> = score(zi).iter().zip(&gbar).map(|(a, b)| a - b).collect();
            for a in 0..np {
                grad[a] += wf * g[a];
                for b in 0..np {
                    hess[a * np + b] += wf * g[a] * g[b];
                }
            }
            for i in 0..d {
                let c = wf * (-2.0 * zi[i] / s[i] - cross_bar[i]);
                hess[i * np + d + i] += c;
                hess[(d + i) * np + i] += c;
                hess[(d + i) * np + d + i] += wf * (-2.0 * zi[i] * zi[i] - ls_bar[i]);
            }
        }
        for i in 0..d {
            grad[d + i] += 1.0;
        }
        (p[d..].iter().sum::<f64>() + fbar, grad, hess)
    }
}

/// Minimizes `KL(q || π*)` over diagonal Gaussians by damped Newton on
/// `(means, log sds)`, starting at the grid mode with the local curvature
/// there.
pub fn kl_project_to_meanfield(pi: &GridDensity) -> Result<MeanFieldProjection> {
    let d = pi.dim();
    let steps = pi.steps();
    let mode = pi.mode_index();
    let idx = pi.unravel(mode);
    let shape = pi.shape();
    let mut p0 = pi.node(mode);
    for a in 0..d {
        let h = steps[a];
        let curv = if idx[a] > 0 && idx[a] + 1 < shape[a] {
            let stride: usize = shape[a + 1..].iter().product();
            let f = &pi.log_values;
            (f[mode + stride] - 2.0 * f[mode] + f[mode - stride]) / (h * h)
        } else {
            0.0
        };
        let sd = if curv < 0.0 { (-1.0 / curv).sqrt() } else { 2.0 * h };
        p0.push(sd.max(h).ln());
    }
    let mut obj = ProjectionObjective::new(pi);
    let out = maximize(
        &mut obj,
        &p0,
        NewtonOptions {
            max_iter: 500,
            max_halvings: 60,
            tol: 1e-14,
        },
    )
    .map_err(|e| Error::NewtonFailure(format!("mean-field projection from {p0:?}: {e}")))?;
    Ok(MeanFieldProjection {
        means: out.x[..d].to_vec(),
        sds: out.x[d..].iter().map(|l| l.exp()).collect(),
        multimodal_fit: pi.local_maxima().len() > 1,
        iterations: out.iterations,
        converged: out.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub points: usize,
    pub halfwidth_sds: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            points: DEFAULT_GRID_POINTS,
            halfwidth_sds: DEFAULT_HALFWIDTH_SDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Per-marginal TV between `q` and the mean-field projection of `π*`.
    pub tv_per_marginal: Vec<f64>,
    /// `|ELBO_p(q) + KL(q || π*) − log ∫ p e^{M_n}|`.
    pub elbo_gap: f64,
    pub kl_q_pi: f64,
    pub log_normalizer: f64,
    pub projection: MeanFieldProjection,
}

/// Compares a fitted diagonal Gaussian `q` with profiled ELBO `elbo_p`
/// against the grid posterior.
pub fn gap_report(pi: &GridDensity, q: &Gaussian, elbo_p: f64) -> Result<GapReport> {
    let projection = kl_project_to_meanfield(pi)?;
    gap_with_projection(pi, q, elbo_p, projection)
}

fn gap_with_projection(
    pi: &GridDensity,
    q: &Gaussian,
    elbo_p: f64,
    projection: MeanFieldProjection,
) -> Result<GapReport> {
    let d = pi.dim();
    if q.dim() != d {
        return Err(Error::Dimension("q and grid dimensions differ".into()));
    }
    let q_sds: Vec<f64> = q.variances().iter().map(|v| v.sqrt()).collect();
    let tv_per_marginal = (0..d)
        .map(|i| {
            crate::gaussian_kl::tv_normal_1d(
                (q.mean()[i], q_sds[i]),
                (projection.means[i], projection.sds[i]),
                crate::gaussian_kl::TV_DEFAULT_INTERVALS,
            )
        })
        .collect();
    let mut p = q.mean().to_vec();
    p.extend(q_sds.iter().map(|s| s.ln()));
    let obj = ProjectionObjective::new(pi);
    if !obj.feasible(&p) {
        return Err(Error::InvalidArgument(format!("q = {p:?} is not resolved by the grid")));
    }
    // H(q) + E_q[log p + M_n] on the grid
    let top = pi.log_values[pi.mode_index()];
    let (w, _) = obj.weights(&p);
    let e_log_target = top + w.iter().zip(&obj.f).map(|(a, b)| a * b).sum::<f64>();
    let entropy = crate::gaussian_kl::entropy(q);
    let kl_q_pi = -entropy - e_log_target + pi.log_normalizer;
    Ok(GapReport {
        tv_per_marginal,
        elbo_gap: (elbo_p + kl_q_pi - pi.log_normalizer).abs(),
        kl_q_pi,
        log_normalizer: pi.log_normalizer,
        projection,
    })
}

/// Fits the VFE (grid center), the grid posterior, its projection and the
/// mean-field VB posterior on the same data and compares them. Mixture
/// labels of the VB fit are aligned to the projection.
pub fn ideal_vs_vb_gap(model: &ModelInstance, data: &Observations, opts: GridOptions) -> Result<GapReport> {
    let init = default_vfe_init(model, data)?;
    let vfe = fit_vfe(model, data, &init, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mut obj = ModelObjective::new(model, data)?;
    let spec = GridSpec::from_curvature(&mut obj, &vfe.theta_hat, opts.halfwidth_sds, opts.points)?;
    let pi = ideal_posterior(&mut obj, &spec)?;
    let projection = kl_project_to_meanfield(&pi)?;
    let vb = fit_vb(model, data, default_init(model, data)?, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let (mut means, mut sds) = (vb.globals.means.clone(), vb.globals.sds.clone());
    if let ModelInstance::Gmm(_) = model {
        let perm = crate::asymptotics::best_permutation(&means, &projection.means);
        means = perm.iter().map(|&p| vb.globals.means[p]).collect();
        sds = perm.iter().map(|&p| vb.globals.sds[p]).collect();
    }
    let vars: Vec<f64> = sds.iter().map(|s| s * s).collect();
    let q = Gaussian::diagonal(means, &vars)?;
    gap_with_projection(&pi, &q, vb.elbo(), projection)
}
