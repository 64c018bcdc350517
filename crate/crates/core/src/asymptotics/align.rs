//! Label alignment for mixture and block models, whose parameters are only
//! identified up to a permutation of the components.

use crate::error::{Error, Result};
use crate::models::ModelInstance;

/// Exhaustive search is used up to this many components.
pub const EXHAUSTIVE_MAX: usize = 5;

/// Squared error of the GMM means after relabeling (`aligned[a] = est[perm[a]]`).
pub fn permutation_cost(est: &[f64], truth: &[f64], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(a, &p)| (est[p] - truth[a]).powi(2)).sum()
}

/// Minimum squared-error relabeling of component means. Exhaustive for
/// `K ≤ 5`, Hungarian assignment beyond. Ties go to the permutation that
/// comes first lexicographically.
pub fn best_permutation(est: &[f64], truth: &[f64]) -> Vec<usize> {
    let k = truth.len();
    if k <= EXHAUSTIVE_MAX {
        let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
        for_each_permutation(k, |p| {
            let c = permutation_cost(est, truth, p);
            if c < best.0 {
                best = (c, p.to_vec());
            }
        });
        best.1
    } else {
        let cost: Vec<f64> = (0..k * k).map(|ij| (est[ij % k] - truth[ij / k]).powi(2)).collect();
        hungarian(k, &cost)
    }
}

/// Visit permutations of `0..k` in lexicographic order.
pub(crate) fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..k).collect();
    loop {
        f(&p);
        // next lexicographic permutation
        let Some(i) = (1..k).rev().find(|&i| p[i - 1] < p[i]) else {
            return;
        };
        let j = (i..k).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// Minimum-cost assignment for a square cost matrix (`cost[row * k + col]`);
/// returns `assign[row] = col`. O(k³) shortest augmenting paths.
pub fn hungarian(k: usize, cost: &[f64]) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1]; // p[col] = row, 1-based, 0 = free
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost[(i0 - 1) * k + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; k];
    for j in 1..=k {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Relabel an estimate to best match `theta0`; returns the aligned vector
/// and the permutation used. GLMM estimates pass through unchanged.
pub fn align_estimate(model: &ModelInstance, est: &[f64], theta0: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    model.check_theta(est)?;
    model.check_theta(theta0)?;
    match model {
        ModelInstance::Glmm(_) => Ok((est.to_vec(), (0..est.len()).collect())),
        ModelInstance::Gmm(_) => {
            let p = best_permutation(est, theta0);
            Ok((p.iter().map(|&i| est[i]).collect(), p))
        }
        ModelInstance::Sbm(m) => {
            if m.k > EXHAUSTIVE_MAX {
                return Err(Error::Unsupported {
                    model: "sbm",
                    what: format!("block alignment is exhaustive and limited to K <= {EXHAUSTIVE_MAX}"),
                });
            }
            let mut best: (f64, Vec<f64>, Vec<usize>) = (f64::INFINITY, est.to_vec(), (0..m.k).collect());
            for_each_permutation(m.k, |p| {
                let cand = m.permute_theta(est, p);
                let c: f64 = cand.iter().zip(theta0).map(|(a, b)| (a - b).powi(2)).sum();
                if c < best.0 {
                    best = (c, cand, p.to_vec());
                }
            });
            Ok((best.1, best.2))
        }
    }
}

/// Factor sds after the relabeling `perm` returned by [`align_estimate`].
///
/// SBM class log odds are re-centred on the last class, so a relabeled
/// `ω_a` is a difference of two independent factors and its sd combines
/// both; ν sds move with their block pair.
pub fn permute_sds(model: &ModelInstance, sds: &[f64], perm: &[usize]) -> Result<Vec<f64>> {
    model.check_theta(sds)?;
    match model {
        ModelInstance::Glmm(_) => Ok(sds.to_vec()),
        ModelInstance::Gmm(m) => {
            if perm.len() != m.k {
                return Err(Error::Dimension(format!(
                    "permutation of length {} for K={}",
                    perm.len(),
                    m.k
                )));
            }
            Ok(perm.iter().map(|&i| sds[i]).collect())
        }
        ModelInstance::Sbm(m) => {
            let k = m.k;
            if perm.len() != k {
                return Err(Error::Dimension(format!(
                    "permutation of length {} for K={k}",
                    perm.len()
                )));
            }
            let omega_sd = |a: usize| if a + 1 == k { 0.0 } else { sds[a] };
            let last = omega_sd(perm[k - 1]);
            let mut out: Vec<f64> = (0..k - 1).map(|a| omega_sd(perm[a]).hypot(last)).collect();
            for a in 0..k {
                for b in a..k {
                    out.push(sds[m.nu_index(perm[a], perm[b])]);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sbm_sds_follow_the_relabeling() {
        let model = ModelInstance::Sbm(crate::models::SbmModel::new(3, 10));
        let sds = [0.1, 0.2, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        // swapping the first two classes leaves ω differences independent of class 3
        let out = permute_sds(&model, &sds, &[1, 0, 2]).unwrap();
        assert_eq!(&out[..2], &[0.2, 0.1]);
        assert_eq!(&out[2..], &[4.0, 2.0, 5.0, 1.0, 3.0, 6.0]);
        // moving class 3 first makes every ω a difference
        let out = permute_sds(&model, &sds, &[2, 0, 1]).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-15);
        assert!((out[1] - 0.1f64.hypot(0.2)).abs() < 1e-15);
    }

    #[test]
    fn permutations_are_lexicographic_and_complete() {
        let mut all = Vec::new();
        for_each_permutation(3, |p| all.push(p.to_vec()));
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 1, 2]);
        assert_eq!(all[1], vec![0, 2, 1]);
        assert_eq!(all[5], vec![2, 1, 0]);
    }

    #[test]
    fn hungarian_agrees_with_exhaustive_search() {
        let mut state = 7u64;
        let mut next = || {
            state = crate::rng::mix64(state);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for k in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..k * k).map(|_| next()).collect();
                let h = hungarian(k, &cost);
                let hc: f64 = h.iter().enumerate().map(|(r, &c)| cost[r * k + c]).sum();
                let mut best = f64::INFINITY;
                for_each_permutation(k, |p| {
                    best = best.min(p.iter().enumerate().map(|(r, &c)| cost[r * k + c]).sum());
                });
                assert!((hc - best).abs() < 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn gmm_alignment_undoes_a_swap() {
        let p = best_permutation(&[2.1, -1.9, 0.2], &[-2.0, 0.0, 2.0]);
        assert_eq!(p, vec![1, 2, 0]);
        // beyond the exhaustive limit
        let truth: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let est: Vec<f64> = [3, 0, 6, 1, 5, 2, 4].iter().map(|&i| i as f64 + 0.01).collect();
        let p = best_permutation(&est, &truth);
        let aligned: Vec<f64> = p.iter().map(|&i| est[i]).collect();
        for (a, t) in aligned.iter().zip(&truth) {
            assert!((a - t).abs() < 0.02);
        }
    }
}
