use rand::Rng as _;
use vblab_core::asymptotics::{align_estimate, glmm_predicted_vars, rate_vector};
use vblab_core::meanfield::{elbo, GlobalGaussianFactors, LocalFactors};
use vblab_core::models::{
    complete_loglik, log_marginal_brute, profile_locals, simulate, GlmmData, GlmmModel, GmmModel, ModelInstance,
    Observations, SbmModel,
};
use vblab_core::rng::rng_from_seed;
use vblab_core::vfe::{
    default_h_grid, default_vfe_init, fit_local_quadratic, fit_vfe, lan_expansion_probe, probe_one, variational_loglik,
    VariationalLoglik,
};
use vblab_core::Error;

/// Mixture log likelihood computed directly, with its own max-shift.
fn mixture_oracle(mu: &[f64], x: &[f64]) -> f64 {
    let k = mu.len() as f64;
    x.iter()
        .map(|&xi| {
            let logs: Vec<f64> = mu
                .iter()
                .map(|m| -0.5 * (xi - m) * (xi - m) - 0.5 * (2.0 * std::f64::consts::PI).ln())
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - k.ln()
        })
        .sum()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn gmm_variational_loglik_is_the_mixture_loglik() {
    let mut rng = rng_from_seed(11);
    for case in 0..40 {
        let k = 1 + case % 3;
        let n = [0usize, 1, 17, 500, 10_000][case % 5];
        let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let model = ModelInstance::Gmm(GmmModel::new(k, n));
        let data = Observations::Gmm { x: x.clone() };
        let (v, locals) = variational_loglik(&model, &mu, &data).unwrap();
        let oracle = mixture_oracle(&mu, &x);
        assert!(
            (v - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
            "case {case}: {v} vs {oracle}"
        );
        assert_eq!(locals.len(), n);
    }
}

#[test]
fn empty_data_gives_zero() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 0));
    let (v, locals) = variational_loglik(&model, &[0.0, 1.0], &Observations::Gmm { x: vec![] }).unwrap();
    assert_eq!(v, 0.0);
    assert!(locals.is_empty());
}

#[test]
fn sbm_variational_loglik_is_sandwiched() {
    let mut rng = rng_from_seed(5);
    for inst in 0..30 {
        let n = 3 + inst % 6;
        let model = ModelInstance::Sbm(SbmModel::new(2, n));
        let truth: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ds = simulate(&model, &truth, 100 + inst as u64).unwrap();
        for _ in 0..5 {
            let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (m_n, _) = variational_loglik(&model, &theta, &ds.data).unwrap();
            let z = profile_locals(&model, &theta, &ds.data).unwrap();
            let lower = complete_loglik(&model, &theta, &z, &ds.data).unwrap();
            let upper = log_marginal_brute(&model, &theta, &ds.data).unwrap() - model.log_prior(&theta).unwrap();
            assert!(lower <= m_n + 1e-9, "lower {lower} > {m_n}");
            assert!(m_n <= upper + 1e-9, "{m_n} > upper {upper}");
        }
    }
}

#[test]
fn variational_loglik_dominates_feasible_elbo() {
    let model = ModelInstance::Sbm(SbmModel::new(2, 40));
    let theta = vec![(0.4f64 / 0.6).ln(), logit(0.8), logit(0.2), logit(0.4)];
    let ds = simulate(&model, &theta, 2).unwrap();
    let (m_n, _) = variational_loglik(&model, &theta, &ds.data).unwrap();
    let g = GlobalGaussianFactors::concentrated(&theta, 1e-9).unwrap();
    let mut rng = rng_from_seed(1);
    for _ in 0..20 {
        let r: Vec<f64> = (0..40)
            .flat_map(|_| {
                let p: f64 = rng.random();
                [p, 1.0 - p]
            })
            .collect();
        let locals = LocalFactors::Responsibilities { k: 2, r };
        // ELBO minus prior and global entropy recovers the local objective.
        let e = elbo(&model, &ds.data, &g, &locals).unwrap()
            - model.log_prior(&theta).unwrap()
            - 4.0 * (0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 1e-9f64.ln());
        assert!(e <= m_n + 1e-6, "{e} > {m_n}");
    }
}

#[test]
fn gmm_vfe_is_consistent() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 5000));
    for seed in 0..50 {
        let ds = simulate(&model, &[-2.0, 2.0], 1000 + seed).unwrap();
        let init = default_vfe_init(&model, &ds.data).unwrap();
        let r = fit_vfe(&model, &ds.data, &init, 1e-10, 1000).unwrap();
        assert!(r.converged);
        let (al, _) = align_estimate(&model, &r.theta_hat, &[-2.0, 2.0]).unwrap();
        assert!(
            (al[0] + 2.0).abs() < 0.1 && (al[1] - 2.0).abs() < 0.1,
            "seed {seed}: {al:?}"
        );
        for w in r.inner_traces.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
        let (v, _) = variational_loglik(&model, &r.theta_hat, &ds.data).unwrap();
        assert!((v - r.m_n_value).abs() <= 1e-9 * v.abs().max(1.0));
    }
}

#[test]
fn glmm_vfe_slopes_within_predicted_error() {
    let theta0 = GlmmModel::reference_theta0();
    let model = ModelInstance::Glmm(GlmmModel::reference_design(2000));
    let ModelInstance::Glmm(g) = &model else { unreachable!() };
    let pred = glmm_predicted_vars(5.0, &theta0[1..5], 2.0, &g.covariates).unwrap();
    let mn = (2000 * 10) as f64;
    let reps = 200;
    let mut inside = 0;
    for rep in 0..reps {
        let ds = simulate(&model, &theta0, 50_000 + rep).unwrap();
        let init = default_vfe_init(&model, &ds.data).unwrap();
        let r = fit_vfe(&model, &ds.data, &init, 1e-10, 1000).unwrap();
        assert!(r.converged);
        for w in r.inner_traces.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
        inside += (0..4)
            .filter(|&k| (r.theta_hat[1 + k] - theta0[1 + k]).abs() <= 3.0 * (pred.tau2[k] / mn).sqrt())
            .count();
    }
    let frac = inside as f64 / (4 * reps) as f64;
    assert!(
        frac >= 0.95,
        "only {frac} of slope estimates inside three standard errors"
    );
}

#[test]
fn all_zero_counts_are_rejected() {
    let model = ModelInstance::Glmm(GlmmModel::new(1, 1, vec![]));
    let data = Observations::Glmm(GlmmData {
        m: 1,
        n: 1,
        d: 0,
        x: vec![],
        y: vec![0],
    });
    let err = fit_vfe(&model, &data, &[0.0, 0.0], 1e-8, 100).unwrap_err();
    assert!(matches!(err, Error::DegenerateData(_)), "{err}");
}

#[test]
fn lan_probe_recovers_planted_quadratic() {
    let grid = default_h_grid(2);
    let (v, delta) = ([[2.0, 0.5], [0.5, 1.0]], [0.3, -0.7]);
    let values: Vec<f64> = grid
        .iter()
        .map(|h| {
            let vh = [v[0][0] * h[0] + v[0][1] * h[1], v[1][0] * h[0] + v[1][1] * h[1]];
            let vd = [
                v[0][0] * delta[0] + v[0][1] * delta[1],
                v[1][0] * delta[0] + v[1][1] * delta[1],
            ];
            h[0] * vd[0] + h[1] * vd[1] - 0.5 * (h[0] * vh[0] + h[1] * vh[1])
        })
        .collect();
    let fit = fit_local_quadratic(&grid, &values).unwrap();
    assert!(fit.sup_residual < 1e-10);
    assert!((fit.v_min_eigenvalue - (1.5 - (0.25f64 + 0.25).sqrt())).abs() < 1e-9);
}

#[test]
fn gmm_lan_residual_shrinks_with_n() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 0));
    let theta0 = [-2.0, 2.0];
    let grid = default_h_grid(2);
    let rows = lan_expansion_probe(&model, &theta0, &grid, &[400, 6400], 30, 77).unwrap();
    let median = |n: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.sup_residual).collect();
        vblab_core::numeric::stats::median(&v)
    };
    assert!(median(6400) < median(400), "{} vs {}", median(6400), median(400));
    let spd = rows.iter().filter(|r| r.n == 6400 && r.v_min_eigenvalue > 0.0).count();
    assert!(spd as f64 >= 0.95 * 30.0);
}

#[test]
fn probe_one_matches_direct_evaluation() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 300));
    let theta0 = [-2.0, 2.0];
    let ds = simulate(&model, &theta0, 3).unwrap();
    let eval = VariationalLoglik::new(&model, &ds.data).unwrap();
    let delta = rate_vector(&model, &theta0).unwrap();
    let grid = default_h_grid(2);
    let fit = probe_one(&eval, &theta0, &delta, &grid).unwrap();
    // GMM curvature per unit δ is the per-datum Fisher information, order one.
    assert!(fit.v_min_eigenvalue > 0.1 && fit.v_min_eigenvalue < 2.0, "{fit:?}");
}
