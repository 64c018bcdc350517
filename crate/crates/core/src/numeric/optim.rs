//! Damped Newton ascent for the small smooth problems that appear in every
//! coordinate update (dimension ≤ a dozen).

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub trait Objective {
    /// Objective value; anything non-finite counts as infeasible.
    fn value(&mut self, x: &[f64]) -> f64;
    /// Value, gradient and row-major Hessian.
    fn derivatives(&mut self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Stop once the Newton decrement `gᵀd / 2` falls below `tol · (1 + |f|)`.
    pub tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 200,
            max_halvings: 30,
            tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Ascent direction `(-H + shift·I)^{-1} g`, shifting until the system is
/// positive definite.
pub fn ascent_direction(grad: &[f64], hess: &[f64]) -> Option<Vec<f64>> {
    let d = grad.len();
    let neg_h = DMatrix::from_row_slice(d, d, hess).map(|v| -v);
    let g = DVector::from_column_slice(grad);
    let scale = (0..d).map(|i| neg_h[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut shift = 0.0;
    for _ in 0..40 {
        let mut m = neg_h.clone();
        for i in 0..d {
            m[(i, i)] += shift;
        }
        if let Some(ch) = m.cholesky() {
            let step = ch.solve(&g);
            if step.iter().all(|v| v.is_finite()) {
                return Some(step.as_slice().to_vec());
            }
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
    }
    None
}

pub fn maximize(obj: &mut impl Objective, x0: &[f64], opts: NewtonOptions) -> Result<NewtonOutcome> {
    let mut x = x0.to_vec();
    let (mut f, mut g, mut h) = obj.derivatives(&x);
    if !f.is_finite() {
        return Err(Error::non_finite(format!("Newton start value at {x:?}")));
    }
    for iter in 0..opts.max_iter {
        let dir =
            ascent_direction(&g, &h).ok_or_else(|| Error::NewtonFailure(format!("no ascent direction at {x:?}")))?;
        let decrement: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(decrement.is_finite()) {
            return Err(Error::non_finite(format!("Newton decrement at {x:?}")));
        }
        if 0.5 * decrement <= opts.tol * (1.0 + f.abs()) {
            return Ok(NewtonOutcome {
                x,
                value: f,
                iterations: iter,
                converged: true,
            });
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let fc = obj.value(&cand);
            if fc.is_finite() && fc >= f {
                accepted = Some(cand);
                break;
            }
            if below_resolution(t, decrement, f) {
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => {
                x = cand;
                let (fn_, gn, hn) = obj.derivatives(&x);
                f = fn_;
                g = gn;
                h = hn;
            }
            None => {
                // Rounding floor: the predicted gain is below what the
                // objective can resolve.
                if 0.5 * decrement <= 1e-9 * (1.0 + f.abs()) {
                    return Ok(NewtonOutcome {
                        x,
                        value: f,
                        iterations: iter,
                        converged: true,
                    });
                }
                return Err(Error::NewtonFailure(format!(
                    "{} halvings without ascent at {x:?} (decrement {decrement:.3e})",
                    opts.max_halvings
                )));
            }
        }
    }
    Ok(NewtonOutcome {
        x,
        value: f,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// Once the gain predicted for step length `t` is below the rounding noise
/// of `f`, further halving cannot produce a measurable ascent.
fn below_resolution(t: f64, decrement: f64, f: f64) -> bool {
    t * decrement <= 1e-13 * (1.0 + f.abs())
}

/// Allocation-free damped Newton for two-dimensional problems, used inside
/// the hot per-coordinate and per-group loops. `derivs` returns the value,
/// gradient and the Hessian entries `(xx, xy, yy)`.
pub fn maximize_2d(
    mut value: impl FnMut([f64; 2]) -> f64,
    mut derivs: impl FnMut([f64; 2]) -> (f64, [f64; 2], [f64; 3]),
    x0: [f64; 2],
    opts: NewtonOptions,
) -> Result<([f64; 2], f64, bool)> {
    let mut x = x0;
    let (mut f, mut g, mut h) = derivs(x);
    if !f.is_finite() {
        return Err(Error::non_finite(format!("Newton start value at {x:?}")));
    }
    for _ in 0..opts.max_iter {
        let dir =
            ascent_direction_2d(g, h).ok_or_else(|| Error::NewtonFailure(format!("no ascent direction at {x:?}")))?;
        let decrement = dir[0] * g[0] + dir[1] * g[1];
        if !decrement.is_finite() {
            return Err(Error::non_finite(format!("Newton decrement at {x:?}")));
        }
        if 0.5 * decrement <= opts.tol * (1.0 + f.abs()) {
            return Ok((x, f, true));
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = [x[0] + t * dir[0], x[1] + t * dir[1]];
            let fc = value(cand);
            if fc.is_finite() && fc >= f {
                x = cand;
                accepted = true;
                break;
            }
            if below_resolution(t, decrement, f) {
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if 0.5 * decrement <= 1e-9 * (1.0 + f.abs()) {
                return Ok((x, f, true));
            }
            return Err(Error::NewtonFailure(format!(
                "{} halvings without ascent at {x:?} (decrement {decrement:.3e})",
                opts.max_halvings
            )));
        }
        (f, g, h) = derivs(x);
    }
    Ok((x, f, false))
}

fn ascent_direction_2d(g: [f64; 2], h: [f64; 3]) -> Option<[f64; 2]> {
    let (a, b, c) = (-h[0], -h[1], -h[2]);
    let scale = a.abs().max(c.abs()).max(1e-12);
    let mut shift = 0.0;
    for _ in 0..40 {
        let (a2, c2) = (a + shift, c + shift);
        let det = a2 * c2 - b * b;
        if a2 > 0.0 && det > 0.0 {
            let d = [(c2 * g[0] - b * g[1]) / det, (a2 * g[1] - b * g[0]) / det];
            if d[0].is_finite() && d[1].is_finite() {
                return Some(d);
            }
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
    }
    None
}

/// Objective built from closures, for one-off problems.
pub struct FnObjective<V, D> {
    pub value: V,
    pub derivatives: D,
}

impl<V, D> Objective for FnObjective<V, D>
where
    V: FnMut(&[f64]) -> f64,
    D: FnMut(&[f64]) -> (f64, Vec<f64>, Vec<f64>),
{
    fn value(&mut self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn derivatives(&mut self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        (self.derivatives)(x)
    }
}

/// Central-difference Hessian of a gradient function.
pub fn fd_hessian_from_gradient(x: &[f64], step: f64, mut grad: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let d = x.len();
    let mut h = vec![0.0; d * d];
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + step;
        let gp = grad(&xp);
        xp[j] = x[j] - step;
        let gm = grad(&xp);
        xp[j] = x[j];
        for i in 0..d {
            h[i * d + j] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    // symmetrize
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = v;
            h[j * d + i] = v;
        }
    }
    h
}

/// Central-difference gradient and Hessian of a scalar function.
pub fn fd_gradient_hessian(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    let f0 = f(x);
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    let mut xp = x.to_vec();
    for i in 0..d {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
        h[i * d + i] = (fp - 2.0 * f0 + fm) / (step * step);
    }
    for i in 0..d {
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * step;
                xp[j] = x[j] + sj * step;
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * step * step);
            h[i * d + j] = v;
            h[j * d + i] = v;
        }
    }
    (g, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_2d_matches_closed_form() {
        // f = -(x-1)² - 2(y+2)² - xy, maximum at (16/7, -18/7)
        let f = |x: [f64; 2]| -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 2.0).powi(2) - x[0] * x[1];
        let (x, _, ok) = maximize_2d(
            f,
            |x| {
                let g = [-2.0 * (x[0] - 1.0) - x[1], -4.0 * (x[1] + 2.0) - x[0]];
                (f(x), g, [-2.0, -1.0, -4.0])
            },
            [0.0, 0.0],
            NewtonOptions::default(),
        )
        .unwrap();
        assert!(ok);
        assert!((x[0] - 16.0 / 7.0).abs() < 1e-12 && (x[1] + 18.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn newton_finds_maximum_of_concave_quadratic() {
        // f(x, y) = -(x-1)² - 2(y+2)² - xy
        let mut obj = FnObjective {
            value: |x: &[f64]| -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 2.0).powi(2) - x[0] * x[1],
            derivatives: |x: &[f64]| {
                let f = -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 2.0).powi(2) - x[0] * x[1];
                let g = vec![-2.0 * (x[0] - 1.0) - x[1], -4.0 * (x[1] + 2.0) - x[0]];
                (f, g, vec![-2.0, -1.0, -1.0, -4.0])
            },
        };
        let out = maximize(&mut obj, &[0.0, 0.0], NewtonOptions::default()).unwrap();
        // Stationarity: 2x + y = 2, x + 4y = -8  =>  x = 16/7, y = -18/7
        assert!((out.x[0] - 16.0 / 7.0).abs() < 1e-12);
        assert!((out.x[1] + 18.0 / 7.0).abs() < 1e-12);
        assert!(out.converged);
    }

    #[test]
    fn newton_handles_infeasible_region_by_halving() {
        // maximize log(x) - x on x > 0, start far away
        let mut obj = FnObjective {
            value: |x: &[f64]| if x[0] > 0.0 { x[0].ln() - x[0] } else { f64::NAN },
            derivatives: |x: &[f64]| (x[0].ln() - x[0], vec![1.0 / x[0] - 1.0], vec![-1.0 / (x[0] * x[0])]),
        };
        let out = maximize(&mut obj, &[0.05], NewtonOptions::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fd_derivatives_of_smooth_function() {
        let f = |x: &[f64]| (x[0] * x[1]).sin() + x[0].powi(3);
        let (g, h) = fd_gradient_hessian(&[0.3, 0.7], 1e-4, f);
        let c = (0.21f64).cos();
        let s = (0.21f64).sin();
        assert!((g[0] - (0.7 * c + 3.0 * 0.09)).abs() < 1e-7);
        assert!((g[1] - 0.3 * c).abs() < 1e-7);
        assert!((h[0] - (-0.49 * s + 1.8)).abs() < 1e-5);
        assert!((h[1] - (c - 0.21 * s)).abs() < 1e-5);
        assert!((h[3] - (-0.09 * s)).abs() < 1e-5);
    }
}
