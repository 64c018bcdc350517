//! Stochastic block model in log-odds coordinates.
//!
//! `π(a) ∝ exp(ω(a))` with `ω(K) = 0`, edge probability `H(a,b) = σ(ν(a,b))`.
//! The adjacency is stored as its strict upper triangle, so the likelihood is
//! a single sum over pairs `i < j`; the doubled sums over ordered pairs in
//! [`BlockCounts`] equal twice that sum.

use super::SbmData;
use crate::error::{Error, Result};
use crate::numeric::special::{log_sum_exp, sigmoid, softplus};
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

fn default_prior_sd() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmModel {
    pub k: usize,
    /// Node count.
    #[serde(default)]
    pub n: usize,
    #[serde(default = "default_prior_sd")]
    pub prior_sd: f64,
}

/// Natural parameters unpacked from the global vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmParams {
    /// Length `K`, last entry fixed at 0.
    pub omega: Vec<f64>,
    /// `K × K` symmetric, row-major.
    pub nu: Vec<f64>,
}

impl SbmParams {
    pub fn log_pi(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.omega);
        self.omega.iter().map(|w| w - lse).collect()
    }
}

impl SbmModel {
    pub fn new(k: usize, n: usize) -> Self {
        SbmModel {
            k,
            n,
            prior_sd: default_prior_sd(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument("sbm needs K >= 2".into()));
        }
        if !(self.prior_sd > 0.0) {
            return Err(Error::InvalidArgument("sbm prior sd must be positive".into()));
        }
        Ok(())
    }

    pub fn global_dim(&self) -> usize {
        self.k - 1 + self.k * (self.k + 1) / 2
    }

    /// Position of `ν(a, b)` in the global vector.
    pub fn nu_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        // row a of the upper triangle starts at a·K − a(a−1)/2
        self.k - 1 + a * self.k - a * a.saturating_sub(1) / 2 + (b - a)
    }

    pub fn coord_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..self.k).map(|a| format!("omega{a}")).collect();
        for a in 0..self.k {
            for b in a..self.k {
                v.push(format!("nu{}{}", a + 1, b + 1));
            }
        }
        v
    }

    pub fn unpack(&self, theta: &[f64]) -> SbmParams {
        let k = self.k;
        let mut omega = theta[..k - 1].to_vec();
        omega.push(0.0);
        let mut nu = vec![0.0; k * k];
        let mut idx = k - 1;
        for a in 0..k {
            for b in a..k {
                nu[a * k + b] = theta[idx];
                nu[b * k + a] = theta[idx];
                idx += 1;
            }
        }
        SbmParams { omega, nu }
    }

    /// Inverse of [`SbmModel::unpack`]; `omega` is re-centred so its last entry is 0.
    pub fn pack(&self, params: &SbmParams) -> Vec<f64> {
        let k = self.k;
        let last = params.omega[k - 1];
        let mut theta: Vec<f64> = params.omega[..k - 1].iter().map(|w| w - last).collect();
        for a in 0..k {
            for b in a..k {
                theta.push(params.nu[a * k + b]);
            }
        }
        theta
    }

    /// Relabel classes: new class `a` is old class `perm[a]`.
    pub fn permute_theta(&self, theta: &[f64], perm: &[usize]) -> Vec<f64> {
        let p = self.unpack(theta);
        let k = self.k;
        let omega: Vec<f64> = (0..k).map(|a| p.omega[perm[a]]).collect();
        let mut nu = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                nu[a * k + b] = p.nu[perm[a] * k + perm[b]];
            }
        }
        self.pack(&SbmParams { omega, nu })
    }

    fn check_link(&self, p: &SbmParams) -> Result<()> {
        for (i, &v) in p.nu.iter().enumerate() {
            let h = sigmoid(v);
            if !(h > 0.0 && h < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "edge probability {h} for nu[{i}] = {v} is not inside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Labels by inverse-CDF draws, then edges `(i, j)`, `i < j`, row-major.
    pub(crate) fn simulate(&self, theta: &[f64], rng: &mut Rng) -> Result<(SbmData, Vec<usize>)> {
        let p = self.unpack(theta);
        self.check_link(&p)?;
        let pi: Vec<f64> = p.log_pi().iter().map(|l| l.exp()).collect();
        let mut z = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut label = self.k - 1;
            for (a, &pa) in pi.iter().enumerate() {
                acc += pa;
                if u < acc {
                    label = a;
                    break;
                }
            }
            z.push(label);
        }
        let h: Vec<f64> = p.nu.iter().map(|&v| sigmoid(v)).collect();
        let mut upper = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let prob = h[z[i] * self.k + z[j]];
                upper.push(u8::from(rng.random::<f64>() < prob));
            }
        }
        Ok((SbmData { n: self.n, upper }, z))
    }

    pub(crate) fn complete_loglik(&self, theta: &[f64], z: &[usize], data: &SbmData) -> Result<f64> {
        if z.len() != data.n {
            return Err(Error::Dimension(format!("{} labels for {} nodes", z.len(), data.n)));
        }
        if let Some(&bad) = z.iter().find(|&&a| a >= self.k) {
            return Err(Error::Dimension(format!("label {bad} out of range K={}", self.k)));
        }
        let p = self.unpack(theta);
        self.check_link(&p)?;
        let k = self.k;
        let log_pi = p.log_pi();
        let sp: Vec<f64> = p.nu.iter().map(|&v| softplus(v)).collect();
        let mut s: f64 = z.iter().map(|&a| log_pi[a]).sum();
        let mut idx = 0;
        for i in 0..data.n {
            let row = z[i] * k;
            for j in i + 1..data.n {
                let ab = row + z[j];
                if data.upper[idx] == 1 {
                    s += p.nu[ab];
                }
                s -= sp[ab];
                idx += 1;
            }
        }
        Ok(s)
    }

    /// Expected edge density `Σ_ab π_a π_b H_ab`; `ρ_n = (n-1)/n` times this.
    pub fn edge_density(&self, theta: &[f64]) -> f64 {
        let p = self.unpack(theta);
        let pi: Vec<f64> = p.log_pi().iter().map(|l| l.exp()).collect();
        let mut s = 0.0;
        for a in 0..self.k {
            for b in 0..self.k {
                s += pi[a] * pi[b] * sigmoid(p.nu[a * self.k + b]);
            }
        }
        s
    }
}

/// Class sizes and ordered-pair counts: `n_a`, `n_ab = Σ_i Σ_{j≠i} 1{Z_i=a, Z_j=b}`,
/// `O_ab = Σ_i Σ_{j≠i} 1{Z_i=a, Z_j=b} A_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCounts {
    pub n_a: Vec<usize>,
    pub n_ab: Vec<usize>,
    pub o_ab: Vec<usize>,
}

pub fn block_counts(k: usize, data: &SbmData, z: &[usize]) -> BlockCounts {
    let mut n_a = vec![0; k];
    for &a in z {
        n_a[a] += 1;
    }
    let mut n_ab = vec![0; k * k];
    let mut o_ab = vec![0; k * k];
    for i in 0..data.n {
        for j in 0..data.n {
            if i == j {
                continue;
            }
            let ab = z[i] * k + z[j];
            n_ab[ab] += 1;
            if data.edge(i, j) {
                o_ab[ab] += 1;
            }
        }
    }
    BlockCounts { n_a, n_ab, o_ab }
}
