//! Gauss–Hermite rules for expectations under a normal law, and composite
//! Simpson integration.

use std::f64::consts::PI;

/// Gauss–Hermite rule rescaled to the standard normal: `E f(Z) ≈ Σ w_i f(z_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let (x, w) = hermite_physicists(order);
        let scale = 1.0 / PI.sqrt();
        GaussHermite {
            nodes: x.iter().map(|&xi| xi * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|&wi| wi * scale).collect(),
        }
    }

    /// `E f(mean + sd·Z)`.
    pub fn expect(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(mean + sd * z))
            .sum()
    }
}

/// Nodes and weights for `∫ e^{-x²} f(x) dx`. Golub–Welsch supplies the
/// nodes; each is polished by Newton steps on the orthonormal Hermite
/// recurrence, carried in scaled form so high orders do not overflow.
fn hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    use nalgebra::{DMatrix, SymmetricEigen};
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 1..n {
        let b = (j as f64 / 2.0).sqrt();
        jac[(j - 1, j)] = b;
        jac[(j, j - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut x: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    x.sort_by(|a, b| b.total_cmp(a));
    let nf = n as f64;
    let mut w = vec![0.0; n];
    for (xi, wi) in x.iter_mut().zip(w.iter_mut()) {
        let mut z = *xi;
        let mut log_w = 0.0;
        for _ in 0..3 {
            // Orthonormal recurrence with p_0 = π^{-1/4}; rescale to stay finite.
            let mut p1 = PI.powf(-0.25);
            let mut p2 = 0.0;
            let mut log_scale = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                let mag = p1.abs().max(p2.abs());
                if mag > 1e100 {
                    p1 /= mag;
                    p2 /= mag;
                    log_scale += mag.ln();
                }
            }
            let pp = (2.0 * nf).sqrt() * p2;
            z -= p1 / pp;
            // w = 2 / (pp · scale)²
            log_w = 2f64.ln() - 2.0 * (pp.abs().ln() + log_scale);
        }
        *xi = z;
        *wi = log_w.exp();
    }
    (x, w)
}

/// Composite Simpson rule on `[a, b]` with `intervals` (rounded up to even).
pub fn simpson(a: f64, b: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}
