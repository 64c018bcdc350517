use nalgebra::DMatrix;
use vblab_core::gaussian_kl::{diag_kl_projection, Gaussian};
use vblab_core::meanfield::{default_init, fit_vb};
use vblab_core::models::{simulate, GmmModel, ModelInstance, Observations};
use vblab_core::numeric::special::normal_pdf;
use vblab_core::vb_ideal::{
    gap_report, ideal_posterior, ideal_vs_vb_gap, kl_project_to_meanfield, GridDensity, GridOptions, GridSpec,
    ModelObjective, ProfiledObjective,
};
use vblab_core::vfe::{default_vfe_init, fit_vfe};
use vblab_core::Result;

/// Flat prior and `M_n` equal to a Gaussian log density with precision `p`.
struct InjectedGaussian {
    mean: Vec<f64>,
    precision: DMatrix<f64>,
}

impl ProfiledObjective for InjectedGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_prior(&self, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn m_n(&mut self, t: &[f64]) -> Result<f64> {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += (t[i] - self.mean[i]) * self.precision[(i, j)] * (t[j] - self.mean[j]);
            }
        }
        Ok(-0.5 * q)
    }
}

/// Symmetric two-bump target.
struct Bimodal;

impl ProfiledObjective for Bimodal {
    fn dim(&self) -> usize {
        1
    }
    fn log_prior(&self, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn m_n(&mut self, t: &[f64]) -> Result<f64> {
        let a = -0.5 * (t[0] - 4.0).powi(2);
        let b = -0.5 * (t[0] + 4.0).powi(2);
        Ok(a.max(b) + (1.0 + (-(a - b).abs()).exp()).ln())
    }
}

fn correlated() -> (InjectedGaussian, Gaussian) {
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let obj = InjectedGaussian {
        mean: vec![1.0, -0.5],
        precision: cov.clone().try_inverse().unwrap(),
    };
    (obj, Gaussian::new(vec![1.0, -0.5], cov).unwrap())
}

#[test]
fn injected_gaussian_is_reproduced() {
    let (mut obj, target) = correlated();
    let spec = GridSpec::new(vec![1.0, -0.5], vec![10.0 * 2f64.sqrt(); 2], 201).unwrap();
    let g = ideal_posterior(&mut obj, &spec).unwrap();
    let total: f64 = g.masses().iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    for tv in g.tv_to_gaussian(&target).unwrap() {
        assert!(tv < 1e-4, "{tv}");
    }
    // normalizer of exp(−½ xᵀPx) is 2π √det Σ
    assert!((g.log_normalizer - (2.0 * std::f64::consts::PI * 3f64.sqrt()).ln()).abs() < 1e-8);
}

#[test]
fn projection_of_gaussian_matches_closed_form() {
    let (mut obj, target) = correlated();
    let spec = GridSpec::new(vec![1.0, -0.5], vec![10.0 * 2f64.sqrt(); 2], 201).unwrap();
    let g = ideal_posterior(&mut obj, &spec).unwrap();
    let p = kl_project_to_meanfield(&g).unwrap();
    let oracle = diag_kl_projection(&target);
    assert!(p.converged && !p.multimodal_fit);
    for i in 0..2 {
        assert!((p.means[i] - oracle.mean()[i]).abs() < 1e-5);
        assert!((p.sds[i] * p.sds[i] - oracle.variances()[i]).abs() < 1e-5, "{p:?}");
    }
    // no locals and an exactly quadratic M_n: the ELBO of q is E_q[M_n] + H(q)
    let q = p.gaussian();
    let prec = &obj.precision;
    let v = q.variances();
    let dm: Vec<f64> = (0..2).map(|i| q.mean()[i] - obj.mean[i]).collect();
    let mut e = 0.0;
    for i in 0..2 {
        e += prec[(i, i)] * v[i];
        for j in 0..2 {
            e += dm[i] * prec[(i, j)] * dm[j];
        }
    }
    let elbo = -0.5 * e + vblab_core::gaussian_kl::entropy(&q);
    let rep = gap_report(&g, &q, elbo).unwrap();
    assert!(rep.elbo_gap < 1e-8, "{}", rep.elbo_gap);
    assert!(rep.tv_per_marginal.iter().all(|t| *t < 1e-6));
}

#[test]
fn bimodal_target_locks_one_mode() {
    let spec = GridSpec::new(vec![0.0], vec![14.0], 561).unwrap();
    let g = ideal_posterior(&mut Bimodal, &spec).unwrap();
    assert_eq!(g.local_maxima().len(), 2);
    let p = kl_project_to_meanfield(&g).unwrap();
    assert!(p.multimodal_fit);
    assert!((p.means[0].abs() - 4.0).abs() < 1e-3, "{p:?}");
    assert!((p.sds[0] - 1.0).abs() < 1e-3);
}

#[test]
fn refinement_leaves_density_unchanged() {
    let (mut obj, _) = correlated();
    let spec = GridSpec::new(vec![1.0, -0.5], vec![10.0 * 2f64.sqrt(); 2], 101).unwrap();
    let coarse = ideal_posterior(&mut obj, &spec).unwrap();
    let fine = ideal_posterior(&mut obj, &spec.refined()).unwrap();
    for axis in 0..2 {
        let tv = fine.marginal_tv_to(axis, |x| coarse.marginal_density_at(axis, x));
        // linear interpolation of the coarse marginal is the only error source
        assert!(tv < 1e-2, "{tv}");
        let tv_nodes: f64 = 0.5
            * coarse.axes[axis]
                .iter()
                .map(|&x| (coarse.marginal_density_at(axis, x) - fine.marginal_density_at(axis, x)).abs())
                .sum::<f64>()
            * coarse.steps()[axis];
        assert!(tv_nodes < 1e-6, "{tv_nodes}");
    }
}

fn conjugate_posterior(x: &[f64]) -> (f64, f64) {
    let var = 1.0 / (1.0 / 100.0 + x.len() as f64);
    (var * x.iter().sum::<f64>(), var.sqrt())
}

#[test]
fn single_component_objects_agree() {
    let model = ModelInstance::Gmm(GmmModel::new(1, 100));
    let ds = simulate(&model, &[0.8], 21).unwrap();
    let Observations::Gmm { x } = &ds.data else { panic!() };
    let (m, s) = conjugate_posterior(x);
    let mut obj = ModelObjective::new(&model, &ds.data).unwrap();
    let spec = GridSpec::from_curvature(&mut obj, &[m], 10.0, 401).unwrap();
    let g = ideal_posterior(&mut obj, &spec).unwrap();
    let exact = Gaussian::univariate(m, s).unwrap();
    assert!(g.tv_to_gaussian(&exact).unwrap()[0] < 1e-4);
    let rep = ideal_vs_vb_gap(&model, &ds.data, GridOptions::default()).unwrap();
    assert!(rep.tv_per_marginal[0] < 1e-3);
    let vb = fit_vb(&model, &ds.data, default_init(&model, &ds.data).unwrap(), 1e-10, 1000).unwrap();
    let q = Gaussian::univariate(vb.globals.means[0], vb.globals.sds[0]).unwrap();
    assert!(g.tv_to_gaussian(&q).unwrap()[0] < 1e-3);
    assert!(vblab_core::gaussian_kl::tv_normal_1d((m, s), (q.mean()[0], vb.globals.sds[0]), 20_000) < 1e-3);
    let grid_sd_curve = |t: f64| normal_pdf(t, m, s);
    assert!(g.marginal_tv_to(0, grid_sd_curve) < 1e-4);
}

#[test]
fn two_component_grid_mode_sits_at_the_vfe() {
    let model = ModelInstance::Gmm(GmmModel::new(2, 2000));
    let ds = simulate(&model, &[-2.0, 2.0], 31).unwrap();
    let vfe = fit_vfe(
        &model,
        &ds.data,
        &default_vfe_init(&model, &ds.data).unwrap(),
        1e-10,
        1000,
    )
    .unwrap();
    let mut obj = ModelObjective::new(&model, &ds.data).unwrap();
    let spec = GridSpec::from_curvature(&mut obj, &vfe.theta_hat, 10.0, 151).unwrap();
    let g = ideal_posterior(&mut obj, &spec).unwrap();
    let mode = g.node(g.mode_index());
    for (i, h) in g.steps().iter().enumerate() {
        assert!(
            (mode[i] - vfe.theta_hat[i]).abs() <= *h,
            "{mode:?} vs {:?}",
            vfe.theta_hat
        );
    }
}

#[test]
fn csv_export_has_one_row_per_node() {
    let mut obj = InjectedGaussian {
        mean: vec![0.0],
        precision: DMatrix::from_element(1, 1, 1.0),
    };
    let g: GridDensity = ideal_posterior(&mut obj, &GridSpec::new(vec![0.0], vec![10.0], 41).unwrap()).unwrap();
    let mut out = Vec::new();
    g.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("theta1,density\n"));
    assert_eq!(text.lines().count(), 42);
}
