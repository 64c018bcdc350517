//! Numerical check of local asymptotic normality: fit
//! `M_n(θ0 + δ_n h) − M_n(θ0) ≈ hᵀVΔ − ½ hᵀVh` by least squares on a
//! lattice of local directions `h` and report the worst residual.

use super::VariationalLoglik;
use crate::asymptotics::rate_vector;
use crate::error::{Error, Result};
use crate::models::{simulate, ModelInstance};
use crate::rng::substream_seed;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;

const MAX_GRID_POINTS: usize = 625;

/// The lattice `{-2,…,2}^d`. When that exceeds 625 points only directions
/// with at most two non-zero entries are kept (still enough to identify
/// every quadratic coefficient), falling back to entries in `{-1, 1}`.
pub fn default_h_grid(d: usize) -> Vec<Vec<f64>> {
    let full = 5usize.checked_pow(d as u32).unwrap_or(usize::MAX);
    if full <= MAX_GRID_POINTS {
        let mut out = Vec::with_capacity(full);
        let mut idx = vec![0usize; d];
        loop {
            out.push(idx.iter().map(|&i| i as f64 - 2.0).collect());
            let mut pos = d;
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < 5 {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
    let sparse = |levels: &[f64]| {
        let mut out = vec![vec![0.0; d]];
        for i in 0..d {
            for &a in levels {
                let mut h = vec![0.0; d];
                h[i] = a;
                out.push(h);
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                for &a in levels {
                    for &b in levels {
                        let mut h = vec![0.0; d];
                        h[i] = a;
                        h[j] = b;
                        out.push(h);
                    }
                }
            }
        }
        out
    };
    let g = sparse(&[-2.0, -1.0, 1.0, 2.0]);
    if g.len() <= MAX_GRID_POINTS {
        g
    } else {
        sparse(&[-1.0, 1.0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanFit {
    /// Fitted curvature `V`, row-major.
    pub v: Vec<f64>,
    /// Fitted linear coefficient `VΔ`.
    pub score: Vec<f64>,
    /// `Δ = V^{-1}(VΔ)`, absent when `V` is singular.
    pub delta: Option<Vec<f64>>,
    pub sup_residual: f64,
    pub v_min_eigenvalue: f64,
}

/// Least-squares fit of `y(h) = hᵀs − ½ hᵀVh` (no intercept: `y(0) = 0`).
pub fn fit_local_quadratic(h_grid: &[Vec<f64>], values: &[f64]) -> Result<LanFit> {
    let d = h_grid.first().map_or(0, |h| h.len());
    if h_grid.len() != values.len() || h_grid.iter().any(|h| h.len() != d) || d == 0 {
        return Err(Error::Dimension("h grid and values disagree".into()));
    }
    let n_quad = d * (d + 1) / 2;
    let p = d + n_quad;
    if h_grid.len() < p {
        return Err(Error::Insufficient(format!(
            "{} grid points for {p} coefficients",
            h_grid.len()
        )));
    }
    let mut x = DMatrix::<f64>::zeros(h_grid.len(), p);
    for (r, h) in h_grid.iter().enumerate() {
        for i in 0..d {
            x[(r, i)] = h[i];
        }
        let mut c = d;
        for i in 0..d {
            for j in i..d {
                x[(r, c)] = if i == j { -0.5 * h[i] * h[i] } else { -h[i] * h[j] };
                c += 1;
            }
        }
    }
    let y = DVector::from_column_slice(values);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(Error::Singular("LAN design matrix is rank deficient".into()));
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::Singular(format!("LAN least squares: {e}")))?;
    let fitted = &x * &beta;
    let sup_residual = (&y - fitted).amax();
    let score: Vec<f64> = beta.rows(0, d).iter().copied().collect();
    let mut v = DMatrix::<f64>::zeros(d, d);
    let mut c = d;
    for i in 0..d {
        for j in i..d {
            v[(i, j)] = beta[c];
            v[(j, i)] = beta[c];
            c += 1;
        }
    }
    let v_min_eigenvalue = v.clone().symmetric_eigen().eigenvalues.min();
    let delta = v
        .clone()
        .lu()
        .solve(&DVector::from_column_slice(&score))
        .map(|s| s.as_slice().to_vec());
    Ok(LanFit {
        v: v.as_slice().to_vec(),
        score,
        delta,
        sup_residual,
        v_min_eigenvalue,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanRow {
    pub n: usize,
    pub rep: usize,
    pub sup_residual: f64,
    pub v_min_eigenvalue: f64,
}

/// For each size and replication: simulate at `theta0` (seed from
/// `(base_seed, n, rep)`), evaluate `M_n` on `θ0 + δ_n h` and fit the
/// local quadratic.
pub fn lan_expansion_probe(
    model: &ModelInstance,
    theta0: &[f64],
    h_grid: &[Vec<f64>],
    n_list: &[usize],
    reps: usize,
    base_seed: u64,
) -> Result<Vec<LanRow>> {
    let mut rows = Vec::with_capacity(n_list.len() * reps);
    for &n in n_list {
        let m = model.with_size(n);
        let delta = rate_vector(&m, theta0)?;
        for rep in 0..reps {
            let ds = simulate(&m, theta0, substream_seed(base_seed, n as u64, rep as u64))?;
            let eval = VariationalLoglik::new(&m, &ds.data)?;
            let fit = probe_one(&eval, theta0, &delta, h_grid)?;
            rows.push(LanRow {
                n,
                rep,
                sup_residual: fit.sup_residual,
                v_min_eigenvalue: fit.v_min_eigenvalue,
            });
        }
    }
    Ok(rows)
}

/// LAN fit for one dataset.
pub fn probe_one(eval: &VariationalLoglik, theta0: &[f64], delta: &[f64], h_grid: &[Vec<f64>]) -> Result<LanFit> {
    let base = eval.value(theta0)?;
    let values = h_grid
        .iter()
        .map(|h| {
            let t: Vec<f64> = theta0.iter().zip(delta).zip(h).map(|((t, d), h)| t + d * h).collect();
            Ok(eval.value(&t)? - base)
        })
        .collect::<Result<Vec<f64>>>()?;
    fit_local_quadratic(h_grid, &values)
}

pub fn write_lan_csv(rows: &[LanRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "n,rep,sup_residual,V_min_eigenvalue")?;
    for r in rows {
        writeln!(w, "{},{},{:e},{:e}", r.n, r.rep, r.sup_residual, r.v_min_eigenvalue)?;
    }
    Ok(())
}
