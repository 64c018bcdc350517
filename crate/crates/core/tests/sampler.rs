use vblab_core::models::{
    gmm, log_marginal_brute, simulate, CovariateLaw, GlmmData, GlmmModel, GmmModel, Observations, SbmModel,
};
use vblab_core::numeric::stats::{effective_sample_size, mean, variance};
use vblab_core::rng::rng_from_seed;
use vblab_core::sampler::*;
use vblab_core::{Error, ModelInstance};

struct StdNormal;

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        -0.5 * x[0] * x[0]
    }
}

struct Flat;

impl LogDensity for Flat {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, _: &[f64]) -> f64 {
        0.0
    }
}

#[test]
fn standard_normal_target() {
    let cfg = ChainConfig::new(60_000, 5_000, 5, 11);
    let out = sample_target(&StdNormal, &[3.0], &cfg).unwrap();
    let col = out.column(0);
    let ess = out.ess[0];
    assert!(ess >= 2000.0, "ess {ess}");
    assert!(ess <= col.len() as f64);
    assert!(mean(&col).abs() < 3.0 / ess.sqrt(), "mean {}", mean(&col));
    let sd = variance(&col).sqrt();
    assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
    let r = out.acceptance_rates[0];
    assert!((0.0..=1.0).contains(&r));
    assert!((r - TARGET_ACCEPTANCE).abs() < 0.05, "acceptance {r}");
    assert!(!out.acceptance_warning);
}

#[test]
fn equal_density_proposals_always_accepted() {
    let mut rng = rng_from_seed(1);
    assert!((0..10_000).all(|_| metropolis_accept(0.0, &mut rng)));
    assert!(!metropolis_accept(f64::NAN, &mut rng));
    assert!(!metropolis_accept(f64::NEG_INFINITY, &mut rng));
    let out = sample_target(&Flat, &[0.0], &ChainConfig::new(2000, 1000, 1, 3)).unwrap();
    assert_eq!(out.acceptance_rates[0], 1.0);
    // adaptation pushes the scale up without bound on a flat target
    assert!(out.acceptance_warning);
}

#[test]
fn detailed_balance_on_five_states() {
    // ring of five states, symmetric ±1 proposal, Metropolis acceptance
    let w = [1.0, 3.0, 0.5, 2.0, 4.0];
    let z: f64 = w.iter().sum();
    let pi: Vec<f64> = w.iter().map(|v| v / z).collect();
    let mut rng = rng_from_seed(5);
    let mut counts = [[0u64; 5]; 5];
    let mut s = 0usize;
    let transitions = 1_000_000;
    for _ in 0..transitions {
        let step = if rand::Rng::random::<bool>(&mut rng) { 1 } else { 4 };
        let t = (s + step) % 5;
        let next = if metropolis_accept(w[t].ln() - w[s].ln(), &mut rng) {
            t
        } else {
            s
        };
        counts[s][next] += 1;
        s = next;
    }
    let n = transitions as f64;
    for i in 0..5 {
        for j in 0..5 {
            if i == j {
                continue;
            }
            // joint frequencies of (i→j) and (j→i) should agree
            let fij = counts[i][j] as f64 / n;
            let fji = counts[j][i] as f64 / n;
            let se = ((fij + fji) / n).sqrt();
            assert!((fij - fji).abs() <= 3.0 * se + 1e-12, "{i}->{j}: {fij} vs {fji}");
            let p_exact =
                pi[i] * 0.5 * (w[j] / w[i]).min(1.0) * if (i + 1) % 5 == j || (j + 1) % 5 == i { 1.0 } else { 0.0 };
            let se_e = (p_exact.max(1e-12) / n).sqrt();
            assert!(
                (fij - p_exact).abs() <= 3.0 * se_e * 3.0,
                "{i}->{j}: {fij} vs exact {p_exact}"
            );
        }
    }
}

#[test]
fn gmm_label_conditional_is_exact() {
    let mu = [-1.5, 0.3, 2.0];
    let mut out = [0.0; 3];
    for &x in &[-4.0, -0.2, 0.0, 1.1, 7.5] {
        label_conditional(&mu, x, &mut out);
        let lik: Vec<f64> = mu.iter().map(|m| gmm::datum_loglik(&[*m], x).exp()).collect();
        let tot: f64 = lik.iter().sum();
        for a in 0..3 {
            assert!((out[a] - lik[a] / tot).abs() < 1e-15);
        }
    }
}

#[test]
fn gmm_one_component_matches_conjugate_posterior() {
    let model = ModelInstance::Gmm(GmmModel::new(1, 50));
    let ds = simulate(&model, &[1.3], 8).unwrap();
    let x = match &ds.data {
        Observations::Gmm { x } => x.clone(),
        _ => unreachable!(),
    };
    let prec = 1.0 / 100.0 + x.len() as f64;
    let post_mean = x.iter().sum::<f64>() / prec;
    let post_sd = prec.powf(-0.5);
    let out = sample_posterior(&model, &ds.data, &ChainConfig::new(21_000, 1_000, 1, 2)).unwrap();
    let col = out.column(0);
    let ess = out.ess[0];
    let m = mean(&col);
    let sd = variance(&col).sqrt();
    assert!((m - post_mean).abs() < 3.0 * post_sd / ess.sqrt(), "{m} vs {post_mean}");
    assert!(
        (sd - post_sd).abs() < 3.0 * post_sd / (2.0 * ess).sqrt(),
        "{sd} vs {post_sd}"
    );
    assert!(out
        .local_draws
        .as_ref()
        .is_some_and(|l| l.len() == col.len() && l[0].len() == 50));
}

/// Random-walk chain on the brute-force marginal posterior of θ.
struct Marginal<'a> {
    model: &'a ModelInstance,
    data: &'a Observations,
}

impl LogDensity for Marginal<'_> {
    fn dim(&self) -> usize {
        self.model.global_dim()
    }
    fn log_density(&self, t: &[f64]) -> f64 {
        // edge probabilities that round to 0 or 1 are rejected by the model;
        // this truncates the prior beyond |ν| ≈ 37, far in its tail
        log_marginal_brute(self.model, t, self.data).unwrap_or(f64::NEG_INFINITY)
    }
}

fn agree(a: &[f64], b: &[f64], label: &str) {
    let se = (variance(a) / effective_sample_size(a) + variance(b) / effective_sample_size(b)).sqrt();
    assert!(
        (mean(a) - mean(b)).abs() < 4.0 * se,
        "{label}: {} vs {} (se {se})",
        mean(a),
        mean(b)
    );
}

#[test]
fn sbm_chain_matches_marginal_chain() {
    let sm = SbmModel::new(2, 9);
    let model = ModelInstance::Sbm(sm.clone());
    let theta0 = vec![0.0, 1.2, -1.0, 0.6];
    let ds = simulate(&model, &theta0, 4).unwrap();
    let cfg = ChainConfig::new(40_000, 4_000, 4, 9);
    let gibbs = sample_posterior(&model, &ds.data, &cfg).unwrap();
    let target = Marginal {
        model: &model,
        data: &ds.data,
    };
    let rw = sample_target(&target, &theta0, &cfg).unwrap();
    // label switching is possible in both; compare permutation-invariant summaries
    let inv = |d: &[f64]| -> [f64; 2] {
        let p = sm.unpack(d);
        [p.nu[1], p.nu[0] + p.nu[3]]
    };
    for c in 0..2 {
        let a: Vec<f64> = gibbs.draws.iter().map(|d| inv(d)[c]).collect();
        let b: Vec<f64> = rw.draws.iter().map(|d| inv(d)[c]).collect();
        agree(&a, &b, &format!("invariant {c}"));
    }
    assert_eq!(gibbs.local_draws.as_ref().unwrap()[0].len(), 9);
}

fn glmm_log_marginal(gm: &GlmmModel, data: &GlmmData, t: &[f64]) -> f64 {
    let d = data.d;
    let sigma = (0.5 * t[d + 1]).exp();
    let mut lp = -0.5 * (t[d + 1] / gm.log_sigma2_prior_sd).powi(2);
    for v in &t[..=d] {
        lp += -0.5 * (v / gm.beta_prior_sd).powi(2);
    }
    // trapezoid over u on ±12 sd
    let nodes = 241;
    for i in 0..data.m {
        let h = 24.0 * sigma / (nodes - 1) as f64;
        let mut terms = Vec::with_capacity(nodes);
        for q in 0..nodes {
            let u = -12.0 * sigma + q as f64 * h;
            let mut s = -0.5 * (u / sigma).powi(2) - sigma.ln();
            for j in 0..data.n {
                let x = data.covariates(i, j);
                let eta = t[0] + u + x.iter().zip(&t[1..=d]).map(|(a, b)| a * b).sum::<f64>();
                s += data.count(i, j) as f64 * eta - eta.exp();
            }
            terms.push(s);
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lp += mx + (terms.iter().map(|v| (v - mx).exp()).sum::<f64>() * h).ln();
    }
    lp
}

struct GlmmMarginal<'a> {
    gm: &'a GlmmModel,
    data: &'a GlmmData,
}

impl LogDensity for GlmmMarginal<'_> {
    fn dim(&self) -> usize {
        self.data.d + 2
    }
    fn log_density(&self, t: &[f64]) -> f64 {
        glmm_log_marginal(self.gm, self.data, t)
    }
}

#[test]
fn glmm_chain_matches_quadrature_marginal_chain() {
    let gm = GlmmModel::new(6, 8, vec![CovariateLaw::StandardNormal]);
    let model = ModelInstance::Glmm(gm.clone());
    let theta0 = vec![1.0, 0.5, 0.0];
    let ds = simulate(&model, &theta0, 21).unwrap();
    let data = match &ds.data {
        Observations::Glmm(d) => d.clone(),
        _ => unreachable!(),
    };
    let cfg = ChainConfig::new(60_000, 6_000, 3, 4);
    let mwg = sample_posterior(&model, &ds.data, &cfg).unwrap();
    let rw = sample_target(&GlmmMarginal { gm: &gm, data: &data }, &theta0, &cfg).unwrap();
    for c in 0..3 {
        agree(&mwg.column(c), &rw.column(c), &mwg.coords[c]);
    }
    assert!(!mwg.acceptance_warning, "{:?}", mwg.moves);
    assert!(mwg.acceptance_rates.iter().all(|r| (0.0..=1.0).contains(r)));
}

#[test]
fn same_seed_same_chain() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 40));
    let ds = simulate(&model, &[-2.0, 2.0], 3).unwrap();
    let cfg = ChainConfig::new(3000, 500, 2, 17);
    let a = sample_posterior(&model, &ds.data, &cfg).unwrap();
    let b = sample_posterior(&model, &ds.data, &cfg).unwrap();
    assert_eq!(a, b);
    let c = sample_posterior(&model, &ds.data, &ChainConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.draws, c.draws);
}

fn fixture(draws: Vec<Vec<f64>>, coords: &[&str]) -> ChainOutput {
    let d = coords.len();
    ChainOutput {
        coords: coords.iter().map(|s| s.to_string()).collect(),
        ess: (0..d)
            .map(|c| effective_sample_size(&draws.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .collect(),
        draws,
        local_draws: None,
        acceptance_rates: vec![1.0; d],
        moves: Vec::new(),
        acceptance_warning: false,
    }
}

#[test]
fn summary_of_constant_chain() {
    let ch = fixture(vec![vec![2.5]; 1500], &["x"]);
    let s = marginal_summary(&ch, None).unwrap();
    assert_eq!(s[0].variance, 0.0);
    assert!(s[0].quantiles.iter().all(|&q| q == 2.5));
    assert_eq!(s[0].mean, 2.5);
}

#[test]
fn summary_of_iid_normals() {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng_from_seed(77);
    let draws: Vec<Vec<f64>> = (0..10_000).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
    let s = marginal_summary(&fixture(draws, &["x"]), None).unwrap();
    assert!((s[0].variance - 1.0).abs() < 0.05);
    assert!((s[0].quantiles[2]).abs() < 0.05);
    assert!((s[0].quantiles[4] - 1.6449).abs() < 0.08);
}

#[test]
fn summary_undoes_label_switching() {
    use rand_distr::{Distribution, Normal};
    let model = ModelInstance::Gmm(GmmModel::new(2, 100));
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rng = rng_from_seed(9);
    let draws: Vec<Vec<f64>> = (0..4000)
        .map(|t| {
            let a = -2.0 + noise.sample(&mut rng);
            let b = 2.0 + noise.sample(&mut rng);
            if (t / 500) % 2 == 0 {
                vec![a, b]
            } else {
                vec![b, a]
            }
        })
        .collect();
    let ch = fixture(draws, &["mu1", "mu2"]);
    let pooled = mean(&ch.column(0));
    assert!(pooled.abs() < 0.1);
    // switching in long runs leaves the raw columns too autocorrelated
    assert!(marginal_summary(&ch, None).is_err());
    let s = marginal_summary(&ch, Some(&model)).unwrap();
    let mut means = [s[0].mean, s[1].mean];
    means.sort_by(f64::total_cmp);
    assert!(
        (means[0] + 2.0).abs() < 0.02 && (means[1] - 2.0).abs() < 0.02,
        "{means:?}"
    );
    assert!(s[0].variance < 0.02);
}

#[test]
fn summary_refusals() {
    let short = fixture(vec![vec![1.0]; 999], &["x"]);
    assert!(matches!(marginal_summary(&short, None), Err(Error::Insufficient(_))));
    // a random walk with tiny steps has ESS far below 100
    let walk: Vec<Vec<f64>> = (0..2000).map(|t| vec![(t as f64 / 300.0).sin()]).collect();
    assert!(matches!(
        marginal_summary(&fixture(walk, &["x"]), None),
        Err(Error::Insufficient(_))
    ));
}

#[test]
fn config_validation_and_csv() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 10));
    let ds = simulate(&model, &[-2.0, 2.0], 1).unwrap();
    for bad in [
        ChainConfig::new(100, 100, 1, 0),
        ChainConfig::new(100, 10, 0, 0),
        ChainConfig {
            proposal_sds: vec![0.0, 1.0],
            ..ChainConfig::new(100, 10, 1, 0)
        },
    ] {
        assert!(matches!(
            sample_posterior(&model, &ds.data, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }
    let out = sample_posterior(&model, &ds.data, &ChainConfig::new(110, 10, 10, 0)).unwrap();
    assert_eq!(out.draws.len(), 10);
    let mut buf = Vec::new();
    out.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mu1,mu2"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, out.draws[0]);
    assert_eq!(text.lines().count(), 11);
}
