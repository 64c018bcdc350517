//! Experiment configuration: TOML for people, JSON as an exact mirror.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use vblab_core::asymptotics::Band;
use vblab_core::sampler::ChainConfig;
use vblab_core::vb_ideal::GridOptions;
use vblab_core::ModelInstance;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Mean-field VB: factor means (the VBE) and factor sds.
    Vb,
    /// Variational EM.
    Vfe,
    /// Reference posterior means and variances from the sampler.
    Mcmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default = "default_tol")]
    pub vb_tol: f64,
    #[serde(default = "default_max_iter")]
    pub vb_max_iter: usize,
    #[serde(default = "default_tol")]
    pub vfe_tol: f64,
    #[serde(default = "default_max_iter")]
    pub vfe_max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    10_000
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            vb_tol: default_tol(),
            vb_max_iter: default_max_iter(),
            vfe_tol: default_tol(),
            vfe_max_iter: default_max_iter(),
        }
    }
}

/// Sampler settings; the chain seed is derived per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default)]
    pub proposal_sds: Vec<f64>,
}

fn one() -> usize {
    1
}

impl SamplerOptions {
    pub fn chain(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            steps: self.steps,
            burn_in: self.burn_in,
            thin: self.thin,
            proposal_sds: self.proposal_sds.clone(),
            seed,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckSpec {
    /// Slope of log RMSE against log size inside `band` for each selected
    /// coordinate (all when `coords` is empty).
    Consistency {
        estimator: Estimator,
        band: Band,
        #[serde(default)]
        coords: Vec<String>,
        #[serde(default = "default_min_sizes")]
        min_sizes: usize,
    },
    /// Median absolute error strictly decreasing across sizes per coordinate.
    ErrorDecreasing {
        estimator: Estimator,
        #[serde(default)]
        coords: Vec<String>,
    },
    RateSeparationGlmm {
        #[serde(default = "default_slope_halfwidth")]
        slope_halfwidth: f64,
        #[serde(default = "default_level_tolerance")]
        level_tolerance: f64,
    },
    /// Within-replication TV decrease and normality of the rescaled VBE.
    Normality {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_min_accept")]
        min_accept: f64,
        /// Monte Carlo draws for the mixture sandwich prediction.
        #[serde(default = "default_sandwich_draws")]
        sandwich_draws: usize,
    },
    /// Median VB/MCMC variance ratio at most `max_ratio` per coordinate.
    Underdispersion {
        #[serde(default = "default_max_ratio")]
        max_ratio: f64,
    },
    /// Median LAN sup-residual smaller at the largest size than at the smallest.
    Lan,
    /// Median TV between VB and the projected VB ideal strictly decreasing.
    VbIdeal {
        #[serde(default)]
        grid: GridOptions,
    },
}

fn default_min_sizes() -> usize {
    4
}
fn default_slope_halfwidth() -> f64 {
    0.2
}
fn default_level_tolerance() -> f64 {
    0.3
}
fn default_alpha() -> f64 {
    0.01
}
fn default_min_accept() -> f64 {
    0.9
}
fn default_sandwich_draws() -> usize {
    200_000
}
fn default_max_ratio() -> f64 {
    1.0
}

impl CheckSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CheckSpec::Consistency { .. } => "consistency",
            CheckSpec::ErrorDecreasing { .. } => "error_decreasing",
            CheckSpec::RateSeparationGlmm { .. } => "rate_separation_glmm",
            CheckSpec::Normality { .. } => "normality",
            CheckSpec::Underdispersion { .. } => "underdispersion",
            CheckSpec::Lan => "lan",
            CheckSpec::VbIdeal { .. } => "vb_ideal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub model: ModelInstance,
    pub theta0: Vec<f64>,
    /// Values of the size knob: `n` for the mixture and block models,
    /// the group count `m` for the GLMM.
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerOptions>,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model
            .check_theta(&self.theta0)
            .map_err(|e| ConfigError::Invalid(format!("theta0: {e}")))?;
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be a non-empty list of positive integers".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("estimators must not be empty".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        match (&self.sampler, self.estimators.contains(&Estimator::Mcmc)) {
            (None, true) => return bad("estimator mcmc needs a [sampler] table".into()),
            (Some(s), _) => s
                .chain(0)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("sampler: {e}")))?,
            _ => {}
        }
        let coords = self.model.coord_names();
        for c in &self.checks {
            match c {
                CheckSpec::Consistency {
                    estimator,
                    band,
                    coords: sel,
                    ..
                } => {
                    Band::new(band.lo, band.hi).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                    self.need(*estimator, c)?;
                    check_coords(sel, &coords)?;
                }
                CheckSpec::ErrorDecreasing { estimator, coords: sel } => {
                    self.need(*estimator, c)?;
                    check_coords(sel, &coords)?;
                }
                CheckSpec::RateSeparationGlmm {
                    slope_halfwidth,
                    level_tolerance,
                } => {
                    if !matches!(self.model, ModelInstance::Glmm(_)) {
                        return bad("rate_separation_glmm needs a glmm model".into());
                    }
                    if !(*slope_halfwidth >= 0.0 && *level_tolerance >= 0.0) {
                        return bad("rate_separation_glmm tolerances must be non-negative".into());
                    }
                    self.need(Estimator::Vb, c)?;
                }
                CheckSpec::Normality { alpha, min_accept, .. } => {
                    if !(*alpha > 0.0 && *alpha < 1.0) || !(0.0..=1.0).contains(min_accept) {
                        return bad("normality alpha must be in (0,1) and min_accept in [0,1]".into());
                    }
                    if matches!(self.model, ModelInstance::Sbm(_)) {
                        return bad("normality has no limiting covariance for the block model".into());
                    }
                    self.need(Estimator::Vb, c)?;
                    self.need(Estimator::Vfe, c)?;
                }
                CheckSpec::Underdispersion { .. } => {
                    self.need(Estimator::Vb, c)?;
                    self.need(Estimator::Mcmc, c)?;
                }
                CheckSpec::Lan => {}
                CheckSpec::VbIdeal { grid } => {
                    if grid.points < 3 || grid.points % 2 == 0 || !(grid.halfwidth_sds > 0.0) {
                        return bad("vb_ideal grid needs an odd point count >= 3 and a positive halfwidth".into());
                    }
                }
            }
        }
        Ok(())
    }

    fn need(&self, e: Estimator, check: &CheckSpec) -> Result<(), ConfigError> {
        if self.estimators.contains(&e) {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!(
                "check {} needs estimator {e:?} in the estimator list",
                check.name()
            )))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    /// Reads `.json` files as JSON and everything else as TOML, then validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg: ExperimentConfig = parsed.map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message: message.trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_coords(sel: &[String], coords: &[String]) -> Result<(), ConfigError> {
    match sel.iter().find(|c| !coords.contains(c)) {
        Some(c) => Err(ConfigError::Invalid(format!(
            "unknown coordinate {c:?}; model has {coords:?}"
        ))),
        None => Ok(()),
    }
}
