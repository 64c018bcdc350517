//! Replication-level checks: consistency rates, normality, dispersion and
//! the GLMM rate separation.

use super::{rate_vector, AsymptoticPrediction, GlmmPrediction};
use crate::error::{Error, Result};
use crate::gaussian_kl::{entropy, tv_normal_1d, Gaussian, TV_DEFAULT_INTERVALS};
use crate::models::ModelInstance;
use crate::numeric::stats::{anderson_darling_normal, median, ols_line, rmse, variance};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io::Write;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("band [{lo}, {hi}] is empty")));
        }
        Ok(Band { lo, hi })
    }

    pub fn around(center: f64, halfwidth: f64) -> Self {
        Band {
            lo: center - halfwidth,
            hi: center + halfwidth,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Machine-readable outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub check: String,
    pub coordinates: Vec<String>,
    pub statistics: BTreeMap<String, Value>,
    pub band: Option<Band>,
    pub pass: bool,
}

/// Replicated estimates at one sample size, one row per replication,
/// already aligned where labels are exchangeable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimates {
    pub n: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requirements {
    pub min_sizes: usize,
    pub min_reps: usize,
}

impl Default for Requirements {
    fn default() -> Self {
        Requirements {
            min_sizes: 4,
            min_reps: 50,
        }
    }
}

fn check_estimates(est: &[SizeEstimates], d: usize, req: Requirements) -> Result<()> {
    let mut sizes: Vec<usize> = est.iter().map(|e| e.n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < req.min_sizes || sizes.len() != est.len() {
        return Err(Error::Insufficient(format!(
            "need {} distinct sample sizes, got {:?}",
            req.min_sizes,
            est.iter().map(|e| e.n).collect::<Vec<_>>()
        )));
    }
    for e in est {
        if e.values.len() < req.min_reps {
            return Err(Error::Insufficient(format!(
                "size {} has {} replications, need {}",
                e.n,
                e.values.len(),
                req.min_reps
            )));
        }
        if e.values.iter().any(|v| v.len() != d) {
            return Err(Error::Dimension(format!(
                "estimates at size {} have the wrong length",
                e.n
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRate {
    pub coord: String,
    pub rmse: Vec<f64>,
    pub median_abs_error: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub sizes: Vec<usize>,
    pub coords: Vec<CoordinateRate>,
    pub band: Band,
    pub pass: bool,
}

impl RateReport {
    pub fn verdict(&self, name: &str) -> CheckVerdict {
        let mut stats = BTreeMap::new();
        stats.insert("sizes".into(), json!(self.sizes));
        for c in &self.coords {
            stats.insert(
                c.coord.clone(),
                json!({"slope": c.slope, "slope_se": c.slope_se, "rmse": c.rmse, "median_abs_error": c.median_abs_error}),
            );
        }
        CheckVerdict {
            check: name.into(),
            coordinates: self.coords.iter().map(|c| c.coord.clone()).collect(),
            statistics: stats,
            band: Some(self.band),
            pass: self.pass,
        }
    }
}

/// OLS slope of `log RMSE` against `log n` per coordinate.
pub fn consistency_check(
    estimates: &[SizeEstimates],
    theta0: &[f64],
    coords: &[String],
    band: Band,
    req: Requirements,
) -> Result<RateReport> {
    let d = theta0.len();
    check_estimates(estimates, d, req)?;
    let mut est: Vec<&SizeEstimates> = estimates.iter().collect();
    est.sort_by_key(|e| e.n);
    let log_n: Vec<f64> = est.iter().map(|e| (e.n as f64).ln()).collect();
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let errs: Vec<Vec<f64>> = est
            .iter()
            .map(|e| e.values.iter().map(|v| v[c] - theta0[c]).collect())
            .collect();
        let r: Vec<f64> = errs.iter().map(|e| rmse(e)).collect();
        let med: Vec<f64> = errs
            .iter()
            .map(|e| median(&e.iter().map(|v| v.abs()).collect::<Vec<_>>()))
            .collect();
        let log_r: Vec<f64> = r.iter().map(|v| v.ln()).collect();
        let fit = ols_line(&log_n, &log_r)?;
        out.push(CoordinateRate {
            coord: coords.get(c).cloned().unwrap_or_else(|| format!("theta{c}")),
            rmse: r,
            median_abs_error: med,
            slope: fit.slope,
            slope_se: fit.slope_se,
            pass: band.contains(fit.slope),
        });
    }
    Ok(RateReport {
        sizes: est.iter().map(|e| e.n).collect(),
        pass: out.iter().all(|c| c.pass),
        coords: out,
        band,
    })
}

/// One replication of the normality check: the fitted mean-field factor
/// and the companion VFE, on the unconstrained scale, aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityRep {
    pub vb_means: Vec<f64>,
    pub vb_sds: Vec<f64>,
    pub vfe: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityInput {
    pub n: usize,
    pub reps: Vec<NormalityRep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityAtSize {
    pub n: usize,
    /// Median over replications of the per-marginal TV, per coordinate.
    pub median_tv: Vec<f64>,
    /// Median over replications and coordinates.
    pub median_tv_all: f64,
    /// Anderson–Darling p-values of `δ_n^{-1}(θ̂* − θ0)` per coordinate.
    pub ad_p_values: Vec<f64>,
    /// Sample variance of the rescaled VBE over the predicted variance.
    pub var_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub coords: Vec<String>,
    pub sizes: Vec<NormalityAtSize>,
    pub tv_strictly_decreasing: bool,
    /// Fraction of coordinates where AD does not reject at `alpha` at the
    /// largest size.
    pub ad_accept_fraction: f64,
    pub alpha: f64,
    pub pass: bool,
}

impl NormalityReport {
    pub fn verdict(&self, name: &str, min_accept: f64) -> CheckVerdict {
        let mut stats = BTreeMap::new();
        for s in &self.sizes {
            stats.insert(format!("n={}", s.n), json!(s));
        }
        stats.insert("tv_strictly_decreasing".into(), json!(self.tv_strictly_decreasing));
        stats.insert("ad_accept_fraction".into(), json!(self.ad_accept_fraction));
        CheckVerdict {
            check: name.into(),
            coordinates: self.coords.clone(),
            statistics: stats,
            band: Some(Band {
                lo: min_accept,
                hi: 1.0,
            }),
            pass: self.pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityOptions {
    pub min_reps: usize,
    pub alpha: f64,
    /// Required fraction of coordinates passing AD at the largest size.
    pub min_accept: f64,
}

impl Default for NormalityOptions {
    fn default() -> Self {
        NormalityOptions {
            min_reps: 100,
            alpha: 0.01,
            min_accept: 0.9,
        }
    }
}

/// Within-replication TV against `N(Δ̂, V'^{-1})` with `Δ̂ = δ_n^{-1}(θ̂ − θ0)`
/// from the VFE, plus across-replication normality of the rescaled VBE.
pub fn normality_check(
    model: &ModelInstance,
    inputs: &[NormalityInput],
    prediction: &AsymptoticPrediction,
    theta0: &[f64],
    opts: NormalityOptions,
) -> Result<NormalityReport> {
    let d = theta0.len();
    if prediction.dim() != d {
        return Err(Error::Dimension("prediction and theta0 differ".into()));
    }
    let mf_sd: Vec<f64> = prediction.mean_field_variances().iter().map(|v| v.sqrt()).collect();
    let cov = prediction.sampling_cov_matrix();
    let mut sizes: Vec<&NormalityInput> = inputs.iter().collect();
    sizes.sort_by_key(|s| s.n);
    let mut out = Vec::new();
    for s in sizes {
        if s.reps.len() < opts.min_reps {
            return Err(Error::Insufficient(format!(
                "normality check at n={} has {} replications, need {}",
                s.n,
                s.reps.len(),
                opts.min_reps
            )));
        }
        let delta = rate_vector(&model.with_size(s.n), theta0)?;
        let mut tv = vec![Vec::with_capacity(s.reps.len()); d];
        let mut z = vec![Vec::with_capacity(s.reps.len()); d];
        for r in &s.reps {
            if r.vfe.len() != d || r.vb_means.len() != d || r.vb_sds.len() != d {
                return Err(Error::Dimension("normality replication has the wrong length".into()));
            }
            for c in 0..d {
                let q = ((r.vb_means[c] - theta0[c]) / delta[c], r.vb_sds[c] / delta[c]);
                let target = ((r.vfe[c] - theta0[c]) / delta[c], mf_sd[c]);
                tv[c].push(tv_normal_1d(q, target, TV_DEFAULT_INTERVALS));
                z[c].push((r.vb_means[c] - theta0[c]) / delta[c]);
            }
        }
        let all: Vec<f64> = tv.iter().flatten().copied().collect();
        let ad = z
            .iter()
            .map(|zc| anderson_darling_normal(zc).map(|a| a.p_value))
            .collect::<Result<Vec<_>>>()?;
        out.push(NormalityAtSize {
            n: s.n,
            median_tv: tv.iter().map(|t| median(t)).collect(),
            median_tv_all: median(&all),
            ad_p_values: ad,
            var_ratio: (0..d).map(|c| variance(&z[c]) / cov[(c, c)]).collect(),
        });
    }
    if out.is_empty() {
        return Err(Error::Insufficient("no sizes supplied".into()));
    }
    let tv_strictly_decreasing = out.windows(2).all(|w| w[1].median_tv_all < w[0].median_tv_all);
    let last = out.last().unwrap();
    let ad_accept_fraction = last.ad_p_values.iter().filter(|&&p| p >= opts.alpha).count() as f64 / d as f64;
    Ok(NormalityReport {
        coords: prediction.coords.clone(),
        pass: tv_strictly_decreasing && ad_accept_fraction >= opts.min_accept,
        sizes: out,
        tv_strictly_decreasing,
        ad_accept_fraction,
        alpha: opts.alpha,
    })
}

/// Reference posterior for the dispersion comparison.
#[derive(Debug, Clone)]
pub enum Reference {
    Gaussian(Gaussian),
    /// Per-coordinate draws with their effective sample sizes.
    Samples {
        draws: Vec<Vec<f64>>,
        ess: Vec<f64>,
    },
}

/// Smallest effective sample size accepted from a sampled reference.
pub const MIN_REFERENCE_ESS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderdispersionReport {
    /// Mean-field variance over reference marginal variance.
    pub ratios: Vec<f64>,
    pub fraction_at_most_one: f64,
    pub entropy_vb: Option<f64>,
    pub entropy_reference: Option<f64>,
}

pub fn underdispersion_check(vb_sds: &[f64], reference: &Reference) -> Result<UnderdispersionReport> {
    let ref_var: Vec<f64> = match reference {
        Reference::Gaussian(g) => g.variances(),
        Reference::Samples { draws, ess } => {
            if let Some((i, e)) = ess.iter().enumerate().find(|(_, e)| **e < MIN_REFERENCE_ESS) {
                return Err(Error::Insufficient(format!(
                    "reference coordinate {i} has effective sample size {e:.0} < {MIN_REFERENCE_ESS}"
                )));
            }
            draws.iter().map(|d| variance(d)).collect()
        }
    };
    if ref_var.len() != vb_sds.len() {
        return Err(Error::Dimension("reference and VB dimensions differ".into()));
    }
    let ratios: Vec<f64> = vb_sds.iter().zip(&ref_var).map(|(s, v)| s * s / v).collect();
    let (entropy_vb, entropy_reference) = match reference {
        Reference::Gaussian(g) => {
            let vars: Vec<f64> = vb_sds.iter().map(|s| s * s).collect();
            let q = Gaussian::diagonal(g.mean().to_vec(), &vars)?;
            (Some(entropy(&q)), Some(entropy(g)))
        }
        Reference::Samples { .. } => (None, None),
    };
    Ok(UnderdispersionReport {
        fraction_at_most_one: ratios.iter().filter(|&&r| r <= 1.0).count() as f64 / ratios.len().max(1) as f64,
        ratios,
        entropy_vb,
        entropy_reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationOptions {
    pub slope_halfwidth: f64,
    /// Relative tolerance of the β_1 variance level against `τ²`.
    pub level_tolerance: f64,
    pub min_reps: usize,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        SeparationOptions {
            slope_halfwidth: 0.15,
            level_tolerance: 0.3,
            min_reps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationCoord {
    pub coord: String,
    /// Variance of the rescaled errors at each `m`.
    pub rescaled_var: Vec<f64>,
    pub predicted_var: f64,
    pub level_ratio: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
    pub slope_pass: bool,
    /// Only asserted for the slope coordinates β_1.
    pub level_pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub m_list: Vec<usize>,
    pub n: usize,
    pub coords: Vec<SeparationCoord>,
    pub band: Band,
    pub pass: bool,
}

impl SeparationReport {
    pub fn verdict(&self, name: &str) -> CheckVerdict {
        let mut stats = BTreeMap::new();
        stats.insert("m_list".into(), json!(self.m_list));
        for c in &self.coords {
            stats.insert(c.coord.clone(), json!(c));
        }
        CheckVerdict {
            check: name.into(),
            coordinates: self.coords.iter().map(|c| c.coord.clone()).collect(),
            statistics: stats,
            band: Some(self.band),
            pass: self.pass,
        }
    }
}

/// Rescaled errors `√m(β̂_0 − β_0)`, `√(mn)(β̂_1 − β_1)`, `√m(σ̂² − σ²)` should
/// have variance flat in `m` at the levels `σ²`, `τ²`, `2σ⁴`. Estimates and
/// `theta0` are on the natural scale `(β_0, β_1, σ²)`.
pub fn rate_separation_glmm(
    results: &[SizeEstimates],
    n: usize,
    theta0_natural: &[f64],
    prediction: &GlmmPrediction,
    opts: SeparationOptions,
) -> Result<SeparationReport> {
    let d = theta0_natural.len();
    let k = prediction.tau2.len();
    if d != k + 2 {
        return Err(Error::Dimension("theta0 does not match the GLMM prediction".into()));
    }
    check_estimates(
        results,
        d,
        Requirements {
            min_sizes: 2,
            min_reps: opts.min_reps,
        },
    )?;
    let mut res: Vec<&SizeEstimates> = results.iter().collect();
    res.sort_by_key(|r| r.n);
    let (m_lo, m_hi) = (res[0].n, res[res.len() - 1].n);
    if (m_hi as f64) < 16.0 * m_lo as f64 {
        return Err(Error::Insufficient(format!(
            "m range {m_lo}..{m_hi} spans less than 16x"
        )));
    }
    let log_m: Vec<f64> = res.iter().map(|r| (r.n as f64).ln()).collect();
    let band = Band::around(0.0, opts.slope_halfwidth);
    let mut names = vec!["beta0".to_string()];
    names.extend((1..=k).map(|i| format!("beta1_{i}")));
    names.push("sigma2".into());
    let mut coords = Vec::with_capacity(d);
    for c in 0..d {
        let predicted = if c == 0 {
            prediction.var_z1
        } else if c <= k {
            prediction.tau2[c - 1]
        } else {
            prediction.var_z3
        };
        let vars: Vec<f64> = res
            .iter()
            .map(|r| {
                let m = r.n as f64;
                let scale = if c >= 1 && c <= k {
                    (m * n as f64).sqrt()
                } else {
                    m.sqrt()
                };
                let z: Vec<f64> = r.values.iter().map(|v| scale * (v[c] - theta0_natural[c])).collect();
                variance(&z)
            })
            .collect();
        let fit = ols_line(&log_m, &vars.iter().map(|v| v.ln()).collect::<Vec<_>>())?;
        let ratio: Vec<f64> = vars.iter().map(|v| v / predicted).collect();
        let level_pass = (c >= 1 && c <= k).then(|| ratio.iter().all(|r| (r - 1.0).abs() <= opts.level_tolerance));
        coords.push(SeparationCoord {
            coord: names[c].clone(),
            rescaled_var: vars,
            predicted_var: predicted,
            level_ratio: ratio,
            slope: fit.slope,
            slope_se: fit.slope_se,
            slope_pass: band.contains(fit.slope),
            level_pass,
        });
    }
    Ok(SeparationReport {
        m_list: res.iter().map(|r| r.n).collect(),
        n,
        pass: coords.iter().all(|c| c.slope_pass && c.level_pass.unwrap_or(true)),
        coords,
        band,
    })
}

/// One line of the long-format CSV report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub n: usize,
    pub rep: usize,
    pub coord: String,
    pub value: f64,
}

pub fn write_long_csv(rows: &[LongRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "n,rep,coord,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{:e}", r.n, r.rep, r.coord, r.value)?;
    }
    Ok(())
}
