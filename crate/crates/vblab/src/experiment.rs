//! Replicated simulate → fit → record sweeps and the checks run on them.

use crate::config::{CheckSpec, Estimator, ExperimentConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::time::Instant;
use vblab_core::asymptotics::{
    align_estimate, consistency_check, default_fd_step, glmm_predicted_vars, glmm_prediction, gmm_sandwich,
    normality_check, permute_sds, rate_separation_glmm, Band, CheckVerdict, NormalityInput, NormalityOptions,
    NormalityRep, Requirements, SeparationOptions, SizeEstimates,
};
use vblab_core::asymptotics::{rate_vector, MIN_REFERENCE_ESS};
use vblab_core::meanfield::{default_init, fit_vb, vbe_from_factors};
use vblab_core::models::{simulate, Dataset};
use vblab_core::numeric::stats::median;
use vblab_core::rng::{mix64, substream_seed, RNG_ID};
use vblab_core::sampler::{marginal_summary, sample_posterior};
use vblab_core::vb_ideal::ideal_vs_vb_gap;
use vblab_core::vfe::{default_h_grid, default_vfe_init, fit_vfe, probe_one, VariationalLoglik};
use vblab_core::{Error, ModelInstance, Result};

/// Largest tolerated share of failed (size, replication, estimator) fits.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// One line of `records.csv`. `error` is the aligned estimate minus the
/// truth for point estimators and empty for spread estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub n: usize,
    pub rep: usize,
    pub estimator: String,
    pub coord: String,
    pub value: f64,
    pub error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub n: usize,
    pub rep: usize,
    pub estimator: Estimator,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub code_version: String,
    pub rng_id: String,
    pub config: ExperimentConfig,
    pub records: Vec<Record>,
    pub failures: Vec<Failure>,
    pub failure_fraction: f64,
    pub verdicts: Vec<CheckVerdict>,
    pub pass: bool,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn too_many_failures(&self) -> bool {
        self.failure_fraction > MAX_FAILURE_FRACTION
    }
}

#[derive(Debug, Clone)]
struct VbFit {
    means: Vec<f64>,
    sds: Vec<f64>,
}

#[derive(Debug, Clone)]
struct McmcFit {
    means: Vec<f64>,
    vars: Vec<f64>,
}

#[derive(Debug, Clone)]
struct RepOutcome {
    n: usize,
    rep: usize,
    vb: Option<VbFit>,
    vfe: Option<Vec<f64>>,
    mcmc: Option<McmcFit>,
    seconds: BTreeMap<Estimator, f64>,
    failures: Vec<Failure>,
}

/// Seed of the dataset at `(size, rep)`; independent of the other sizes.
pub fn dataset_seed(base: u64, n: usize, rep: usize) -> u64 {
    substream_seed(base, n as u64, rep as u64)
}

/// The simulated dataset for one replication.
pub fn replication_dataset(cfg: &ExperimentConfig, n: usize, rep: usize) -> Result<Dataset> {
    simulate(&cfg.model.with_size(n), &cfg.theta0, dataset_seed(cfg.seed, n, rep))
}

fn run_rep(cfg: &ExperimentConfig, n: usize, rep: usize) -> RepOutcome {
    let mut out = RepOutcome {
        n,
        rep,
        vb: None,
        vfe: None,
        mcmc: None,
        seconds: BTreeMap::new(),
        failures: Vec::new(),
    };
    let model = cfg.model.with_size(n);
    let ds = match replication_dataset(cfg, n, rep) {
        Ok(ds) => ds,
        Err(e) => {
            for &est in &cfg.estimators {
                out.failures.push(Failure {
                    n,
                    rep,
                    estimator: est,
                    reason: format!("simulation: {e}"),
                });
            }
            return out;
        }
    };
    for &est in &cfg.estimators {
        let t = Instant::now();
        let res = match est {
            Estimator::Vb => fit_vb_aligned(cfg, &model, &ds).map(|f| out.vb = Some(f)),
            Estimator::Vfe => fit_vfe_aligned(cfg, &model, &ds).map(|f| out.vfe = Some(f)),
            Estimator::Mcmc => {
                let seed = mix64(ds.seed ^ 0x6d63_6d63);
                sample_aligned(cfg, &model, &ds, seed).map(|f| out.mcmc = Some(f))
            }
        };
        out.seconds.insert(est, t.elapsed().as_secs_f64());
        if let Err(e) = res {
            out.failures.push(Failure {
                n,
                rep,
                estimator: est,
                reason: e.to_string(),
            });
        }
    }
    out
}

fn fit_vb_aligned(cfg: &ExperimentConfig, model: &ModelInstance, ds: &Dataset) -> Result<VbFit> {
    let r = fit_vb(
        model,
        &ds.data,
        default_init(model, &ds.data)?,
        cfg.fit.vb_tol,
        cfg.fit.vb_max_iter,
    )?;
    if !r.converged {
        return Err(Error::InnerNonConvergence(format!(
            "CAVI after {} sweeps",
            r.iterations
        )));
    }
    let (means, perm) = align_estimate(model, &r.globals.means, &cfg.theta0)?;
    let sds = permute_sds(model, &r.globals.sds, &perm)?;
    Ok(VbFit { means, sds })
}

fn fit_vfe_aligned(cfg: &ExperimentConfig, model: &ModelInstance, ds: &Dataset) -> Result<Vec<f64>> {
    let init = default_vfe_init(model, &ds.data)?;
    let r = fit_vfe(model, &ds.data, &init, cfg.fit.vfe_tol, cfg.fit.vfe_max_iter)?;
    if !r.converged {
        return Err(Error::InnerNonConvergence(format!(
            "variational EM after {} iterations",
            r.em_iterations
        )));
    }
    Ok(align_estimate(model, &r.theta_hat, &cfg.theta0)?.0)
}

fn sample_aligned(cfg: &ExperimentConfig, model: &ModelInstance, ds: &Dataset, seed: u64) -> Result<McmcFit> {
    let opts = cfg.sampler.as_ref().expect("validated: mcmc has sampler options");
    let chain = sample_posterior(model, &ds.data, &opts.chain(seed))?;
    if let Some((c, e)) = chain.ess.iter().enumerate().find(|(_, e)| **e < MIN_REFERENCE_ESS) {
        return Err(Error::Insufficient(format!(
            "chain ESS {e:.0} for {} is below {MIN_REFERENCE_ESS}",
            chain.coords[c]
        )));
    }
    let summary = marginal_summary(&chain, Some(model))?;
    let means: Vec<f64> = summary.iter().map(|s| s.mean).collect();
    let sds: Vec<f64> = summary.iter().map(|s| s.variance.sqrt()).collect();
    let (means, perm) = align_estimate(model, &means, &cfg.theta0)?;
    // exact for the mixture and for two blocks, where relabeling only flips ω
    let sds = permute_sds(model, &sds, &perm)?;
    Ok(McmcFit {
        means,
        vars: sds.iter().map(|s| s * s).collect(),
    })
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

fn tasks(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    cfg.sizes
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .collect()
}

/// Runs every replication on `jobs` workers (results merge in (size, rep)
/// order), then the configured checks.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let start = Instant::now();
    let pool = pool(jobs);
    let outcomes: Vec<RepOutcome> =
        pool.install(|| tasks(cfg).par_iter().map(|&(n, rep)| run_rep(cfg, n, rep)).collect());
    let records = records(cfg, &outcomes);
    let failures: Vec<Failure> = outcomes.iter().flat_map(|o| o.failures.clone()).collect();
    let total = outcomes.len() * cfg.estimators.len();
    let failure_fraction = failures.len() as f64 / total as f64;
    let verdicts: Vec<CheckVerdict> = cfg
        .checks
        .iter()
        .map(|c| run_check(cfg, c, &outcomes, &pool).unwrap_or_else(|e| failed_verdict(c, &e)))
        .collect();
    let pass = failure_fraction <= MAX_FAILURE_FRACTION && verdicts.iter().all(|v| v.pass);
    Ok(ExperimentReport {
        schema_version: crate::config::SCHEMA_VERSION,
        code_version: crate::code_version(),
        rng_id: RNG_ID.to_string(),
        config: cfg.clone(),
        records,
        failures,
        failure_fraction,
        verdicts,
        pass,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

fn records(cfg: &ExperimentConfig, outcomes: &[RepOutcome]) -> Vec<Record> {
    let coords = cfg.model.coord_names();
    let d = coords.len();
    let mut out = Vec::new();
    for o in outcomes {
        for &est in &cfg.estimators {
            let secs = o.seconds.get(&est).copied();
            let mut push = |name: &str, vals: Option<&[f64]>, with_error: bool| {
                for c in 0..d {
                    let value = vals.map_or(f64::NAN, |v| v[c]);
                    out.push(Record {
                        n: o.n,
                        rep: o.rep,
                        estimator: name.to_string(),
                        coord: coords[c].clone(),
                        value,
                        error: (with_error && value.is_finite()).then(|| value - cfg.theta0[c]),
                        seconds: secs,
                    });
                }
            };
            match est {
                Estimator::Vb => {
                    push("vbe", o.vb.as_ref().map(|v| v.means.as_slice()), true);
                    push("vb_sd", o.vb.as_ref().map(|v| v.sds.as_slice()), false);
                }
                Estimator::Vfe => push("vfe", o.vfe.as_deref(), true),
                Estimator::Mcmc => {
                    push("mcmc_mean", o.mcmc.as_ref().map(|v| v.means.as_slice()), true);
                    push("mcmc_var", o.mcmc.as_ref().map(|v| v.vars.as_slice()), false);
                }
            }
        }
    }
    out
}

/// Record series per estimator.
pub fn series_per_estimator(e: Estimator) -> usize {
    match e {
        Estimator::Vb | Estimator::Mcmc => 2,
        Estimator::Vfe => 1,
    }
}

fn failed_verdict(c: &CheckSpec, e: &Error) -> CheckVerdict {
    let mut statistics = BTreeMap::new();
    statistics.insert("error".to_string(), json!(e.to_string()));
    CheckVerdict {
        check: c.name().into(),
        coordinates: Vec::new(),
        statistics,
        band: None,
        pass: false,
    }
}

fn point_estimates(cfg: &ExperimentConfig, outcomes: &[RepOutcome], e: Estimator) -> Vec<SizeEstimates> {
    cfg.sizes
        .iter()
        .map(|&n| SizeEstimates {
            n,
            values: outcomes
                .iter()
                .filter(|o| o.n == n)
                .filter_map(|o| match e {
                    Estimator::Vb => o.vb.as_ref().map(|v| v.means.clone()),
                    Estimator::Vfe => o.vfe.clone(),
                    Estimator::Mcmc => o.mcmc.as_ref().map(|v| v.means.clone()),
                })
                .collect(),
        })
        .collect()
}

fn selected(all: &[String], sel: &[String]) -> Vec<usize> {
    if sel.is_empty() {
        (0..all.len()).collect()
    } else {
        (0..all.len()).filter(|&c| sel.contains(&all[c])).collect()
    }
}

fn run_check(
    cfg: &ExperimentConfig,
    check: &CheckSpec,
    outcomes: &[RepOutcome],
    pool: &rayon::ThreadPool,
) -> Result<CheckVerdict> {
    let coords = cfg.model.coord_names();
    match check {
        CheckSpec::Consistency {
            estimator,
            band,
            coords: sel,
            min_sizes,
        } => {
            let req = Requirements {
                min_sizes: *min_sizes,
                ..Requirements::default()
            };
            let mut rep = consistency_check(
                &point_estimates(cfg, outcomes, *estimator),
                &cfg.theta0,
                &coords,
                *band,
                req,
            )?;
            let keep = selected(&coords, sel);
            rep.coords = keep.iter().map(|&c| rep.coords[c].clone()).collect();
            rep.pass = rep.coords.iter().all(|c| c.pass);
            Ok(rep.verdict(check.name()))
        }
        CheckSpec::ErrorDecreasing { estimator, coords: sel } => {
            let req = Requirements {
                min_sizes: 2,
                ..Requirements::default()
            };
            let wide = Band::new(f64::MIN, f64::MAX)?;
            let rep = consistency_check(
                &point_estimates(cfg, outcomes, *estimator),
                &cfg.theta0,
                &coords,
                wide,
                req,
            )?;
            let mut stats = BTreeMap::new();
            stats.insert("sizes".into(), json!(rep.sizes));
            let mut pass = true;
            let keep = selected(&coords, sel);
            for &c in &keep {
                let m = &rep.coords[c].median_abs_error;
                let dec = m.windows(2).all(|w| w[1] < w[0]);
                pass &= dec;
                stats.insert(coords[c].clone(), json!({"median_abs_error": m, "decreasing": dec}));
            }
            Ok(CheckVerdict {
                check: check.name().into(),
                coordinates: keep.iter().map(|&c| coords[c].clone()).collect(),
                statistics: stats,
                band: None,
                pass,
            })
        }
        CheckSpec::RateSeparationGlmm {
            slope_halfwidth,
            level_tolerance,
        } => {
            let ModelInstance::Glmm(gm) = &cfg.model else {
                unreachable!("validated")
            };
            let log_scale = cfg.model.log_scale_coords();
            let natural0 = vbe_from_factors(&cfg.theta0, &vec![0.0; cfg.theta0.len()], &log_scale).natural;
            let d = gm.covariates.len();
            let pred = glmm_predicted_vars(natural0[0], &natural0[1..=d], natural0[d + 1], &gm.covariates)?;
            let est: Vec<SizeEstimates> = cfg
                .sizes
                .iter()
                .map(|&n| SizeEstimates {
                    n,
                    values: outcomes
                        .iter()
                        .filter(|o| o.n == n)
                        .filter_map(|o| o.vb.as_ref())
                        .map(|v| vbe_from_factors(&v.means, &v.sds, &log_scale).natural)
                        .collect(),
                })
                .collect();
            let opts = SeparationOptions {
                slope_halfwidth: *slope_halfwidth,
                level_tolerance: *level_tolerance,
                ..SeparationOptions::default()
            };
            Ok(rate_separation_glmm(&est, gm.n, &natural0, &pred, opts)?.verdict(check.name()))
        }
        CheckSpec::Normality {
            alpha,
            min_accept,
            sandwich_draws,
        } => {
            let base = cfg.model.with_size(cfg.sizes[0]);
            let prediction = match &cfg.model {
                ModelInstance::Gmm(_) => {
                    gmm_sandwich(
                        &base,
                        &cfg.theta0,
                        *sandwich_draws,
                        default_fd_step(&cfg.theta0),
                        mix64(cfg.seed),
                    )?
                    .prediction
                }
                _ => glmm_prediction(&base, &cfg.theta0)?,
            };
            let inputs: Vec<NormalityInput> = cfg
                .sizes
                .iter()
                .map(|&n| NormalityInput {
                    n,
                    reps: outcomes
                        .iter()
                        .filter(|o| o.n == n)
                        .filter_map(|o| match (&o.vb, &o.vfe) {
                            (Some(v), Some(f)) => Some(NormalityRep {
                                vb_means: v.means.clone(),
                                vb_sds: v.sds.clone(),
                                vfe: f.clone(),
                            }),
                            _ => None,
                        })
                        .collect(),
                })
                .collect();
            let opts = NormalityOptions {
                alpha: *alpha,
                min_accept: *min_accept,
                ..NormalityOptions::default()
            };
            Ok(
                normality_check(&cfg.model, &inputs, &prediction, &cfg.theta0, opts)?
                    .verdict(check.name(), *min_accept),
            )
        }
        CheckSpec::Underdispersion { max_ratio } => {
            let mut stats = BTreeMap::new();
            let mut pass = true;
            for &n in &cfg.sizes {
                let ratios: Vec<Vec<f64>> = outcomes
                    .iter()
                    .filter(|o| o.n == n)
                    .filter_map(|o| match (&o.vb, &o.mcmc) {
                        (Some(v), Some(m)) => Some(v.sds.iter().zip(&m.vars).map(|(s, var)| s * s / var).collect()),
                        _ => None,
                    })
                    .collect();
                if ratios.is_empty() {
                    return Err(Error::Insufficient(format!("no paired VB and MCMC fits at size {n}")));
                }
                let med: Vec<f64> = (0..coords.len())
                    .map(|c| median(&ratios.iter().map(|r| r[c]).collect::<Vec<_>>()))
                    .collect();
                pass &= med.iter().all(|&r| r <= *max_ratio);
                stats.insert(format!("n={n}"), json!({"median_ratio": med, "reps": ratios.len()}));
            }
            Ok(CheckVerdict {
                check: check.name().into(),
                coordinates: coords,
                statistics: stats,
                band: Some(Band::new(0.0, *max_ratio)?),
                pass,
            })
        }
        CheckSpec::Lan => {
            let h_grid = default_h_grid(cfg.theta0.len());
            let res: Vec<Result<(usize, f64)>> = pool.install(|| {
                tasks(cfg)
                    .par_iter()
                    .map(|&(n, rep)| {
                        let ds = replication_dataset(cfg, n, rep)?;
                        let model = cfg.model.with_size(n);
                        let eval = VariationalLoglik::new(&model, &ds.data)?;
                        let delta = rate_vector(&model, &cfg.theta0)?;
                        Ok((n, probe_one(&eval, &cfg.theta0, &delta, &h_grid)?.sup_residual))
                    })
                    .collect()
            });
            let res = res.into_iter().collect::<Result<Vec<_>>>()?;
            let medians = per_size_medians(cfg, &res);
            Ok(decreasing_verdict(
                check.name(),
                "median_sup_residual",
                &cfg.sizes,
                &medians,
                false,
            ))
        }
        CheckSpec::VbIdeal { grid } => {
            let res: Vec<Result<(usize, f64, bool)>> = pool.install(|| {
                tasks(cfg)
                    .par_iter()
                    .map(|&(n, rep)| {
                        let ds = replication_dataset(cfg, n, rep)?;
                        let g = ideal_vs_vb_gap(&cfg.model.with_size(n), &ds.data, *grid)?;
                        Ok((n, median(&g.tv_per_marginal), g.projection.multimodal_fit))
                    })
                    .collect()
            });
            let res = res.into_iter().collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(usize, f64)> = res.iter().map(|r| (r.0, r.1)).collect();
            let medians = per_size_medians(cfg, &pairs);
            let mut v = decreasing_verdict(check.name(), "median_tv", &cfg.sizes, &medians, true);
            let multimodal = res.iter().filter(|r| r.2).count();
            v.statistics.insert("multimodal_fits".into(), json!(multimodal));
            Ok(v)
        }
    }
}

fn per_size_medians(cfg: &ExperimentConfig, vals: &[(usize, f64)]) -> Vec<f64> {
    cfg.sizes
        .iter()
        .map(|&n| median(&vals.iter().filter(|v| v.0 == n).map(|v| v.1).collect::<Vec<_>>()))
        .collect()
}

/// `strict`: every consecutive size must improve; otherwise only the
/// largest size against the smallest.
fn decreasing_verdict(name: &str, stat: &str, sizes: &[usize], medians: &[f64], strict: bool) -> CheckVerdict {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| sizes[i]);
    let m: Vec<f64> = order.iter().map(|&i| medians[i]).collect();
    let pass = if strict {
        m.windows(2).all(|w| w[1] < w[0])
    } else {
        m.len() >= 2 && m[m.len() - 1] < m[0]
    };
    let mut statistics = BTreeMap::new();
    statistics.insert(
        "sizes".into(),
        json!(order.iter().map(|&i| sizes[i]).collect::<Vec<_>>()),
    );
    statistics.insert(stat.into(), json!(m));
    CheckVerdict {
        check: name.into(),
        coordinates: Vec::new(),
        statistics,
        band: None,
        pass,
    }
}

/// CSV column contract: `n,rep,estimator,coord,value,error,seconds`.
pub fn write_records_csv(records: &[Record], w: impl std::io::Write) -> std::io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["n", "rep", "estimator", "coord", "value", "error", "seconds"])?;
    for r in records {
        wr.write_record([
            r.n.to_string(),
            r.rep.to_string(),
            r.estimator.clone(),
            r.coord.clone(),
            r.value.to_string(),
            r.error.map(|e| e.to_string()).unwrap_or_default(),
            r.seconds.map(|s| format!("{s:.6}")).unwrap_or_default(),
        ])?;
    }
    wr.flush()
}

pub fn read_records_csv(r: impl std::io::Read) -> std::result::Result<Vec<Record>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}
