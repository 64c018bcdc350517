use proptest::prelude::*;
use vblab_core::models::{
    self, complete_loglik, log_joint, log_marginal_brute, profile_locals, sbm::block_counts, simulate, CovariateLaw,
    GlmmData, GlmmModel, GmmModel, Locals, ModelInstance, Observations, SbmData, SbmModel,
};
use vblab_core::numeric::special::{log_sum_exp, normal_logpdf, softplus, LN_2PI};
use vblab_core::Error;

fn gmm(k: usize, n: usize) -> ModelInstance {
    ModelInstance::Gmm(GmmModel::new(k, n))
}

#[test]
fn glmm_reference_design_produces_poisson_counts() {
    let model = ModelInstance::Glmm(GlmmModel::reference_design(30));
    let ds = simulate(&model, &GlmmModel::reference_theta0(), 11).unwrap();
    let Observations::Glmm(d) = &ds.data else { panic!() };
    assert_eq!((d.m, d.n, d.d), (30, 10, 4));
    assert_eq!(d.y.len(), 300);
    assert_eq!(d.x.len(), 1200);
    // Bernoulli coordinates are 0/1
    for i in 0..d.m {
        for j in 0..d.n {
            let x = d.covariates(i, j);
            assert!(x[2] == 0.0 || x[2] == 1.0);
            assert!(x[3] == 0.0 || x[3] == 1.0);
        }
    }
    // intercept e^5 ≈ 148 dominates: counts are large on average
    let mean_y = d.y.iter().sum::<u64>() as f64 / d.y.len() as f64;
    assert!(mean_y > 50.0, "mean count {mean_y}");
    let Some(Locals::Glmm(u)) = &ds.locals else { panic!() };
    assert_eq!(u.len(), 30);
}

#[test]
fn zero_observations_give_empty_datasets() {
    let ds = simulate(&gmm(2, 0), &[0.0, 1.0], 1).unwrap();
    assert_eq!(ds.data, Observations::Gmm { x: vec![] });
    let ds = simulate(
        &ModelInstance::Glmm(GlmmModel::reference_design(0)),
        &GlmmModel::reference_theta0(),
        1,
    )
    .unwrap();
    assert_eq!(ds.size(), 0);
    let ds = simulate(&ModelInstance::Sbm(SbmModel::new(2, 0)), &[0.0, 0.0, -1.0, 0.0], 1).unwrap();
    assert_eq!(ds.size(), 0);
}

#[test]
fn simulate_rejects_bad_theta() {
    assert!(matches!(simulate(&gmm(2, 5), &[0.0], 1), Err(Error::Dimension(_))));
    assert!(matches!(
        simulate(&gmm(2, 5), &[0.0, f64::NAN], 1),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn simulate_is_bit_reproducible() {
    for model in [
        gmm(3, 50),
        ModelInstance::Glmm(GlmmModel::reference_design(5)),
        ModelInstance::Sbm(SbmModel::new(2, 20)),
    ] {
        let theta: Vec<f64> = match &model {
            ModelInstance::Gmm(_) => vec![-1.0, 0.0, 2.0],
            ModelInstance::Glmm(_) => GlmmModel::reference_theta0(),
            ModelInstance::Sbm(_) => vec![0.3, 0.5, -1.5, 0.0],
        };
        let a = simulate(&model, &theta, 99).unwrap();
        let b = simulate(&model, &theta, 99).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = simulate(&model, &theta, 100).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }
}

#[test]
fn separated_mixture_sample_mean_of_abs_is_ten() {
    // |x| ~ |N(±10, 1)| has mean 10 (up to e^{-50}) and sd 1.
    let se = 1.0 / (1000f64).sqrt();
    let mut inside = 0;
    for seed in 0..40 {
        let ds = simulate(&gmm(2, 1000), &[-10.0, 10.0], seed).unwrap();
        let Observations::Gmm { x } = &ds.data else { panic!() };
        let m = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
        if (m - 10.0).abs() < 3.0 * se {
            inside += 1;
        }
    }
    // P(|Z| < 3) = 0.9973; 40 seeds -> expect ~40
    assert!(inside >= 38, "{inside}/40 within 3 SE");
}

#[test]
fn gmm_single_component_log_joint() {
    let model = gmm(1, 3);
    let x = vec![0.5, -1.0, 2.0];
    let mu = [0.3];
    let got = log_joint(
        &model,
        &mu,
        &Locals::Gmm(vec![0, 0, 0]),
        &Observations::Gmm { x: x.clone() },
    )
    .unwrap();
    let want = normal_logpdf(0.3, 0.0, 10.0) + x.iter().map(|&v| normal_logpdf(v, 0.3, 1.0)).sum::<f64>();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn gmm_symmetric_components_term() {
    let model = gmm(2, 1);
    let got = complete_loglik(
        &model,
        &[0.0, 0.0],
        &Locals::Gmm(vec![0]),
        &Observations::Gmm { x: vec![0.0] },
    )
    .unwrap();
    assert!((got - (0.5f64.ln() - 0.5 * LN_2PI)).abs() < 1e-14);
}

#[test]
fn glmm_single_cell_terms() {
    let model = ModelInstance::Glmm(GlmmModel::new(1, 1, vec![CovariateLaw::StandardNormal]));
    let data = Observations::Glmm(GlmmData {
        m: 1,
        n: 1,
        d: 1,
        x: vec![0.0],
        y: vec![0],
    });
    // θ = (β0, β1, log σ²) = (0, 0.7, 0): Poisson term -exp(0) = -1, U term log N(0; 0, 1)
    let theta = [0.0, 0.7, 0.0];
    let complete = complete_loglik(&model, &theta, &Locals::Glmm(vec![0.0]), &data).unwrap();
    assert!((complete - (-1.0 - 0.5 * LN_2PI)).abs() < 1e-14);
    let joint = log_joint(&model, &theta, &Locals::Glmm(vec![0.0]), &data).unwrap();
    let prior = normal_logpdf(0.0, 0.0, 10.0) + normal_logpdf(0.7, 0.0, 10.0) + normal_logpdf(0.0, 0.0, 2.0);
    assert!((joint - complete - prior).abs() < 1e-14);
}

#[test]
fn marginal_of_empty_data_is_prior() {
    let model = gmm(2, 0);
    let got = log_marginal_brute(&model, &[1.0, -2.0], &Observations::Gmm { x: vec![] }).unwrap();
    assert!((got - model.log_prior(&[1.0, -2.0]).unwrap()).abs() < 1e-15);
}

#[test]
fn glmm_has_no_brute_force_marginal() {
    let model = ModelInstance::Glmm(GlmmModel::reference_design(1));
    let ds = simulate(&model, &GlmmModel::reference_theta0(), 3).unwrap();
    assert!(matches!(
        log_marginal_brute(&model, &ds.theta0, &ds.data),
        Err(Error::Unsupported { .. })
    ));
    assert!(matches!(
        profile_locals(&model, &ds.theta0, &ds.data),
        Err(Error::Unsupported { .. })
    ));
}

#[test]
fn enumeration_budget_rejects_large_instances() {
    let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let err = log_marginal_brute(&gmm(3, 20), &[0.0, 1.0, 2.0], &Observations::Gmm { x }).unwrap_err();
    assert!(matches!(err, Error::EnumerationBudget { .. }));
}

/// Direct sum over all 8 labelings of a 3-node, 2-block graph, written out
/// pair by pair.
#[test]
fn sbm_three_node_marginal_matches_direct_sum() {
    let model = SbmModel::new(2, 3);
    let inst = ModelInstance::Sbm(model.clone());
    let data = SbmData {
        n: 3,
        upper: vec![1, 0, 1],
    };
    let theta = [0.4, 1.2, -0.7, 0.3];
    let (omega, nu11, nu12, nu22) = (0.4, 1.2, -0.7, 0.3);
    let log_pi = [omega - softplus(omega), -softplus(omega)];
    let nu = |a: usize, b: usize| match (a.min(b), a.max(b)) {
        (0, 0) => nu11,
        (0, 1) => nu12,
        _ => nu22,
    };
    let edges = [(0, 1, 1.0), (0, 2, 0.0), (1, 2, 1.0)];
    let mut terms = Vec::new();
    let mut best = (f64::NEG_INFINITY, vec![]);
    for z0 in 0..2 {
        for z1 in 0..2 {
            for z2 in 0..2 {
                let z = [z0, z1, z2];
                let mut s = log_pi[z0] + log_pi[z1] + log_pi[z2];
                for &(i, j, a) in &edges {
                    let v = nu(z[i], z[j]);
                    s += a * v - softplus(v);
                }
                if s > best.0 {
                    best = (s, z.to_vec());
                }
                terms.push(s);
            }
        }
    }
    let direct = log_sum_exp(&terms) + inst.log_prior(&theta).unwrap();
    let brute = log_marginal_brute(&inst, &theta, &Observations::Sbm(data.clone())).unwrap();
    assert!((direct - brute).abs() < 1e-12);
    let Locals::Sbm(z) = profile_locals(&inst, &theta, &Observations::Sbm(data)).unwrap() else {
        panic!()
    };
    assert_eq!(z, best.1);
}

#[test]
fn gmm_profile_is_nearest_mean_with_low_index_ties() {
    let model = gmm(3, 4);
    let x = vec![-3.0, 0.0, 0.9, 5.0];
    let Locals::Gmm(c) = profile_locals(&model, &[-1.0, 1.0, 4.0], &Observations::Gmm { x }).unwrap() else {
        panic!()
    };
    // 0.0 is equidistant from -1 and 1: lowest index wins
    assert_eq!(c, vec![0, 0, 1, 2]);
}

#[test]
fn sbm_simulated_graph_structure_and_counts() {
    let model = SbmModel::new(3, 40);
    let inst = ModelInstance::Sbm(model.clone());
    let theta = vec![0.2, -0.1, 0.5, -1.0, -2.0, 0.3, -1.5, 1.0];
    assert_eq!(theta.len(), inst.global_dim());
    let ds = simulate(&inst, &theta, 5).unwrap();
    let Observations::Sbm(d) = &ds.data else { panic!() };
    let Some(Locals::Sbm(z)) = &ds.locals else { panic!() };
    for i in 0..d.n {
        assert!(!d.edge(i, i));
        for j in 0..d.n {
            assert_eq!(d.edge(i, j), d.edge(j, i));
        }
    }
    let counts = block_counts(3, d, z);
    assert_eq!(counts.n_a.iter().sum::<usize>(), d.n);
    for ab in 0..9 {
        assert!(counts.o_ab[ab] <= counts.n_ab[ab]);
    }
    // ordered-pair form: Σ_a n_a log π_a + ½ Σ_ab (O_ab ν_ab − n_ab softplus(ν_ab))
    let p = model.unpack(&theta);
    let log_pi = p.log_pi();
    let mut via_counts: f64 = (0..3).map(|a| counts.n_a[a] as f64 * log_pi[a]).sum();
    for ab in 0..9 {
        via_counts += 0.5 * (counts.o_ab[ab] as f64 * p.nu[ab] - counts.n_ab[ab] as f64 * softplus(p.nu[ab]));
    }
    let direct = complete_loglik(&inst, &theta, &Locals::Sbm(z.clone()), &ds.data).unwrap();
    assert!((via_counts - direct).abs() < 1e-9 * direct.abs());
}

#[test]
fn sbm_pack_unpack_and_permutation() {
    let model = SbmModel::new(3, 0);
    let theta = vec![0.2, -0.1, 0.5, -1.0, -2.0, 0.3, -1.5, 1.0];
    assert_eq!(model.pack(&model.unpack(&theta)), theta);
    assert_eq!(model.nu_index(1, 2), 2 + 4);
    assert_eq!(model.nu_index(2, 1), 6);
    assert_eq!(model.nu_index(2, 2), 7);
    let id = model.permute_theta(&theta, &[0, 1, 2]);
    for (a, b) in id.iter().zip(&theta) {
        assert!((a - b).abs() < 1e-15);
    }
    // swapping twice is the identity
    let p = model.permute_theta(&model.permute_theta(&theta, &[2, 0, 1]), &[1, 2, 0]);
    for (a, b) in p.iter().zip(&theta) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dataset_json_round_trip_and_csv() {
    let model = ModelInstance::Glmm(GlmmModel::reference_design(2));
    let ds = simulate(&model, &GlmmModel::reference_theta0(), 8).unwrap();
    let back = models::Dataset::from_json(&ds.to_json()).unwrap();
    assert_eq!(ds, back);
    let Observations::Glmm(d) = &ds.data else { panic!() };
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "group,idx,x1,x2,x3,x4,y");
    assert_eq!(text.lines().count(), 21);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Enumeration over K^n labelings equals the factorized mixture likelihood.
    #[test]
    fn gmm_brute_force_marginal_factorizes(
        k in 1usize..=3,
        xs in prop::collection::vec(-5.0f64..5.0, 0..=10),
        mus in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let model = gmm(k, xs.len());
        let mu = &mus[..k];
        let brute = log_marginal_brute(&model, mu, &Observations::Gmm { x: xs.clone() }).unwrap();
        let factorized = models::gmm::mixture_loglik(mu, &xs) + model.log_prior(mu).unwrap();
        prop_assert!((brute - factorized).abs() < 1e-10 * (1.0 + factorized.abs()));
        let z = profile_locals(&model, mu, &Observations::Gmm { x: xs.clone() }).unwrap();
        let at_profile = log_joint(&model, mu, &z, &Observations::Gmm { x: xs }).unwrap();
        prop_assert!(at_profile <= brute + 1e-12);
    }

    #[test]
    fn sbm_profile_beats_every_labeling(seed in 0u64..1000, n in 2usize..=6) {
        let inst = ModelInstance::Sbm(SbmModel::new(2, n));
        let theta = [0.3, 1.0, -1.0, 0.5];
        let ds = simulate(&inst, &theta, seed).unwrap();
        let z = profile_locals(&inst, &theta, &ds.data).unwrap();
        let best = log_joint(&inst, &theta, &z, &ds.data).unwrap();
        let marg = log_marginal_brute(&inst, &theta, &ds.data).unwrap();
        prop_assert!(best <= marg);
        for code in 0..(1usize << n) {
            let labels: Vec<usize> = (0..n).map(|i| (code >> (n - 1 - i)) & 1).collect();
            let v = log_joint(&inst, &theta, &Locals::Sbm(labels), &ds.data).unwrap();
            prop_assert!(v <= best);
        }
    }
}
