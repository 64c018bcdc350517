use super::{GlmmModel, ModelInstance};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Observations plus, for simulated data, the locals that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub model: ModelInstance,
    pub theta0: Vec<f64>,
    pub seed: u64,
    pub data: Observations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locals: Option<Locals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Observations {
    Gmm { x: Vec<f64> },
    Glmm(GlmmData),
    Sbm(SbmData),
}

impl Observations {
    pub fn kind(&self) -> &'static str {
        match self {
            Observations::Gmm { .. } => "gmm",
            Observations::Glmm(_) => "glmm",
            Observations::Sbm(_) => "sbm",
        }
    }
}

/// Grouped covariates and counts; `x` is `m × n × d` row-major, `y` is `m × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmData {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<u64>,
}

impl GlmmData {
    pub fn covariates(&self, group: usize, idx: usize) -> &[f64] {
        let start = (group * self.n + idx) * self.d;
        &self.x[start..start + self.d]
    }

    pub fn count(&self, group: usize, idx: usize) -> u64 {
        self.y[group * self.n + idx]
    }

    pub fn group_total(&self, group: usize) -> u64 {
        self.y[group * self.n..(group + 1) * self.n].iter().sum()
    }

    pub(crate) fn check(&self, model: &GlmmModel) -> Result<()> {
        if self.d != model.covariates.len() {
            return Err(Error::Dimension(format!(
                "data has {} covariates, model {}",
                self.d,
                model.covariates.len()
            )));
        }
        if self.x.len() != self.m * self.n * self.d || self.y.len() != self.m * self.n {
            return Err(Error::Dimension(format!(
                "glmm arrays ({} covariates, {} counts) do not match m={} n={} d={}",
                self.x.len(),
                self.y.len(),
                self.m,
                self.n,
                self.d
            )));
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("glmm covariate {i}")));
        }
        Ok(())
    }

    /// CSV with columns `group, idx, x1..xd, y` (1-based group and index).
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        write!(w, "group,idx")?;
        for k in 1..=self.d {
            write!(w, ",x{k}")?;
        }
        writeln!(w, ",y")?;
        for i in 0..self.m {
            for j in 0..self.n {
                write!(w, "{},{}", i + 1, j + 1)?;
                for v in self.covariates(i, j) {
                    write!(w, ",{v}")?;
                }
                writeln!(w, ",{}", self.count(i, j))?;
            }
        }
        Ok(())
    }
}

/// Undirected graph without self-loops stored as the strict upper triangle,
/// row-major: entry `(i, j)`, `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmData {
    pub n: usize,
    pub upper: Vec<u8>,
}

impl SbmData {
    pub fn index(n: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < n);
        i * n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.upper[Self::index(self.n, a, b)] == 1
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.n];
        let mut idx = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.upper[idx] == 1 {
                    nb[i].push(j);
                    nb[j].push(i);
                }
                idx += 1;
            }
        }
        nb
    }

    pub fn edge_count(&self) -> usize {
        self.upper.iter().filter(|&&a| a == 1).count()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let expected = self.n * self.n.saturating_sub(1) / 2;
        if self.upper.len() != expected {
            return Err(Error::Dimension(format!(
                "adjacency has {} upper entries, expected {expected} for n={}",
                self.upper.len(),
                self.n
            )));
        }
        if self.upper.iter().any(|&a| a > 1) {
            return Err(Error::InvalidArgument("adjacency entries must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum Locals {
    /// Component labels `c_i`, 0-based.
    Gmm(Vec<usize>),
    /// Random intercepts `U_i`.
    Glmm(Vec<f64>),
    /// Block labels `Z_i`, 0-based.
    Sbm(Vec<usize>),
}

impl Locals {
    pub fn kind(&self) -> &'static str {
        match self {
            Locals::Gmm(_) => "gmm",
            Locals::Glmm(_) => "glmm",
            Locals::Sbm(_) => "sbm",
        }
    }
}

impl Dataset {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Number of observation units along the swept size axis.
    pub fn size(&self) -> usize {
        match &self.data {
            Observations::Gmm { x } => x.len(),
            Observations::Glmm(d) => d.m,
            Observations::Sbm(d) => d.n,
        }
    }
}
