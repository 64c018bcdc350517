//! Descriptive statistics and small regressions used by the checks.

use crate::error::{Error, Result};
use crate::numeric::special::normal_cdf;

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7).
pub fn quantile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

pub fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let h = (s.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Ordinary least-squares line `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Standard error of the slope; zero when the fit is exact or has two points.
    pub slope_se: f64,
}

pub fn ols_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "ols: {} abscissae vs {} ordinates",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Insufficient("ols needs at least two points".into()));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Insufficient("ols abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if x.len() > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let r = b - intercept - slope * a;
                r * r
            })
            .sum();
        (rss / (x.len() - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_se,
    })
}

/// Anderson–Darling normality test with estimated mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AndersonDarling {
    pub statistic: f64,
    /// Small-sample adjusted statistic `A²(1 + 0.75/N + 2.25/N²)`.
    pub adjusted: f64,
    pub p_value: f64,
}

pub fn anderson_darling_normal(sample: &[f64]) -> Result<AndersonDarling> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::Insufficient(format!(
            "Anderson-Darling needs at least 8 observations, got {n}"
        )));
    }
    let m = mean(sample);
    let sd = variance(sample).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Insufficient("Anderson-Darling sample is constant".into()));
    }
    let mut z: Vec<f64> = sample.iter().map(|x| (x - m) / sd).collect();
    z.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let fi = normal_cdf(z[i]).clamp(1e-300, 1.0 - 1e-16);
        let fj = normal_cdf(z[n - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        s += (2.0 * i as f64 + 1.0) * (fi.ln() + (1.0 - fj).ln());
    }
    let a2 = -nf - s / nf;
    let adj = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    // D'Agostino & Stephens (1986), table 4.9.
    let p = if adj >= 0.6 {
        (1.2937 - 5.709 * adj + 0.0186 * adj * adj).exp()
    } else if adj >= 0.34 {
        (0.9177 - 4.279 * adj - 1.38 * adj * adj).exp()
    } else if adj >= 0.2 {
        1.0 - (-8.318 + 42.796 * adj - 59.938 * adj * adj).exp()
    } else {
        1.0 - (-13.436 + 101.14 * adj - 223.73 * adj * adj).exp()
    };
    Ok(AndersonDarling {
        statistic: a2,
        adjusted: adj,
        p_value: p.clamp(0.0, 1.0),
    })
}

/// Effective sample size by Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(chain);
    let c0: f64 = chain.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let autocov = |lag: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - lag {
            s += (chain[t] - m) * (chain[t + lag] - m);
        }
        s / n as f64
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let g = if lag == 0 {
            c0 + autocov(1)
        } else {
            autocov(lag) + autocov(lag + 1)
        };
        if g <= 0.0 {
            break;
        }
        let g = g.min(prev_pair);
        prev_pair = g;
        sum_pairs += g;
        lag += 2;
    }
    let tau = (-c0 + 2.0 * sum_pairs) / c0;
    (n as f64 / tau.max(1e-12)).min(n as f64)
}
