//! Metropolis-within-Gibbs reference sampler for the exact posterior.
//!
//! One step is a full sweep over every block. Proposal scales adapt by
//! Robbins–Monro toward a 0.35 acceptance rate during burn-in only; kept
//! draws come from the frozen kernel.

use crate::asymptotics::align_estimate;
use crate::error::{Error, Result};
use crate::models::sbm::block_counts;
use crate::models::{GlmmData, GlmmModel, GmmModel, ModelInstance, Observations, SbmData, SbmModel};
use crate::numeric::special::{log_sum_exp, normal_logpdf, softplus};
use crate::numeric::stats::{effective_sample_size, mean, quantile_sorted, variance};
use crate::rng::{rng_from_seed, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const TARGET_ACCEPTANCE: f64 = 0.35;
/// Acceptance window outside of which the chain is flagged.
pub const ACCEPTANCE_BOUNDS: (f64, f64) = (0.1, 0.7);
pub const MIN_SUMMARY_DRAWS: usize = 1000;
pub const MIN_SUMMARY_ESS: f64 = 100.0;
/// Local draws are stored only for models with at most this many locals.
pub const LOCAL_DRAW_LIMIT: usize = 64;
const DEFAULT_PROPOSAL_SD: f64 = 0.1;
const RELABEL_MAX_PASSES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial proposal sds for the Metropolis moves on the globals; empty
    /// uses 0.1 for each.
    #[serde(default)]
    pub proposal_sds: Vec<f64>,
    pub seed: u64,
    /// Starting globals; `None` uses a data-driven start.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

impl ChainConfig {
    pub fn new(steps: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        ChainConfig {
            steps,
            burn_in,
            thin,
            proposal_sds: Vec::new(),
            seed,
            init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::InvalidArgument(format!(
                "steps ({}) must exceed burn_in ({})",
                self.steps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thin must be at least 1".into()));
        }
        if self.proposal_sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("proposal sds must be positive".into()));
        }
        Ok(())
    }

    fn initial_sds(&self, d: usize) -> Result<Vec<f64>> {
        match self.proposal_sds.len() {
            0 => Ok(vec![DEFAULT_PROPOSAL_SD; d]),
            l if l == d => Ok(self.proposal_sds.clone()),
            l => Err(Error::Dimension(format!("{l} proposal sds for {d} moves"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub name: String,
    /// Frozen proposal sd; `None` for exact Gibbs updates.
    pub proposal_sd: Option<f64>,
    /// Post-burn-in acceptance rate (1 for Gibbs updates).
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub coords: Vec<String>,
    /// Kept global draws, one row per draw.
    pub draws: Vec<Vec<f64>>,
    /// Kept local draws for small models.
    pub local_draws: Option<Vec<Vec<f64>>>,
    /// Acceptance rate of the move driving each global coordinate.
    pub acceptance_rates: Vec<f64>,
    pub moves: Vec<MoveStats>,
    pub ess: Vec<f64>,
    /// Some Metropolis move ended outside the acceptance window.
    pub acceptance_warning: bool,
}

impl ChainOutput {
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[c]).collect()
    }

    /// One column per coordinate, one row per kept draw.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", self.coords.join(","))?;
        for d in &self.draws {
            let row: Vec<String> = d.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Metropolis acceptance for a symmetric proposal.
pub fn metropolis_accept(log_ratio: f64, rng: &mut Rng) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    rng.random::<f64>().ln() < log_ratio
}

/// Per-move proposal scales with Robbins–Monro adaptation and counters.
#[derive(Debug, Clone)]
struct Adapter {
    names: Vec<String>,
    log_sd: Vec<f64>,
    accepted: Vec<u64>,
    proposed: Vec<u64>,
}

impl Adapter {
    fn new(names: Vec<String>, sds: &[f64]) -> Self {
        let k = names.len();
        Adapter {
            names,
            log_sd: sds.iter().map(|s| s.ln()).collect(),
            accepted: vec![0; k],
            proposed: vec![0; k],
        }
    }

    fn sd(&self, j: usize) -> f64 {
        self.log_sd[j].exp()
    }

    fn record(&mut self, j: usize, ok: bool, step: usize, adapting: bool) {
        self.proposed[j] += 1;
        self.accepted[j] += ok as u64;
        if adapting {
            let gain = (step as f64 + 1.0).powf(-0.6);
            self.log_sd[j] += gain * ((ok as u8) as f64 - TARGET_ACCEPTANCE);
        }
    }

    fn reset_counts(&mut self) {
        self.accepted.iter_mut().for_each(|a| *a = 0);
        self.proposed.iter_mut().for_each(|p| *p = 0);
    }

    fn rate(&self, j: usize) -> f64 {
        if self.proposed[j] == 0 {
            0.0
        } else {
            self.accepted[j] as f64 / self.proposed[j] as f64
        }
    }

    fn stats(&self) -> Vec<MoveStats> {
        (0..self.names.len())
            .map(|j| MoveStats {
                name: self.names[j].clone(),
                proposal_sd: Some(self.sd(j)),
                acceptance_rate: self.rate(j),
            })
            .collect()
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Target for [`sample_target`].
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn coord_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("theta{i}")).collect()
    }
}

/// Shared driver: `sweep(step, adapting)` advances the chain one step and
/// returns the current globals and locals.
fn run_chain(
    cfg: &ChainConfig,
    coords: Vec<String>,
    keep_locals: bool,
    mut sweep: impl FnMut(usize, bool) -> Result<(Vec<f64>, Vec<f64>)>,
    mut after_burn_in: impl FnMut(),
) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>, Vec<f64>)> {
    let kept = (cfg.steps - cfg.burn_in).div_ceil(cfg.thin);
    let mut draws = Vec::with_capacity(kept);
    let mut locals = keep_locals.then(|| Vec::with_capacity(kept));
    for step in 0..cfg.steps {
        if step == cfg.burn_in {
            after_burn_in();
        }
        let adapting = step < cfg.burn_in;
        let (g, l) = sweep(step, adapting)?;
        if !adapting && (step - cfg.burn_in) % cfg.thin == 0 {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("chain state at step {step}")));
            }
            draws.push(g);
            if let Some(ld) = locals.as_mut() {
                ld.push(l);
            }
        }
    }
    let ess = (0..coords.len())
        .map(|c| effective_sample_size(&draws.iter().map(|d: &Vec<f64>| d[c]).collect::<Vec<_>>()))
        .collect();
    Ok((draws, locals, ess))
}

fn finish(
    coords: Vec<String>,
    draws: Vec<Vec<f64>>,
    local_draws: Option<Vec<Vec<f64>>>,
    ess: Vec<f64>,
    moves: Vec<MoveStats>,
    acceptance_rates: Vec<f64>,
) -> ChainOutput {
    let (lo, hi) = ACCEPTANCE_BOUNDS;
    let acceptance_warning = moves
        .iter()
        .filter(|m| m.proposal_sd.is_some())
        .any(|m| m.acceptance_rate < lo || m.acceptance_rate > hi);
    ChainOutput {
        coords,
        draws,
        local_draws,
        acceptance_rates,
        moves,
        ess,
        acceptance_warning,
    }
}

/// Random-walk Metropolis within Gibbs, one coordinate at a time.
pub fn sample_target(target: &dyn LogDensity, x0: &[f64], cfg: &ChainConfig) -> Result<ChainOutput> {
    cfg.validate()?;
    let d = target.dim();
    if x0.len() != d {
        return Err(Error::Dimension(format!(
            "start of length {} for a {d}-dim target",
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::non_finite("log density at the chain start"));
    }
    let coords = target.coord_names();
    let mut rng = rng_from_seed(cfg.seed);
    let mut ad = Adapter::new(coords.clone(), &cfg.initial_sds(d)?);
    let ad_cell = std::cell::RefCell::new(&mut ad);
    let (draws, _, ess) = run_chain(
        cfg,
        coords.clone(),
        false,
        |step, adapting| {
            let mut ad = ad_cell.borrow_mut();
            for j in 0..d {
                let old = x[j];
                x[j] = old + ad.sd(j) * normal(&mut rng);
                let lp_new = target.log_density(&x);
                let ok = metropolis_accept(lp_new - lp, &mut rng);
                if ok {
                    lp = lp_new;
                } else {
                    x[j] = old;
                }
                ad.record(j, ok, step, adapting);
            }
            Ok((x.clone(), Vec::new()))
        },
        || ad_cell.borrow_mut().reset_counts(),
    )?;
    let moves = ad.stats();
    let rates = moves.iter().map(|m| m.acceptance_rate).collect();
    Ok(finish(coords, draws, None, ess, moves, rates))
}

/// Samples `p(θ, z | x)` and keeps the globals (and small local blocks).
pub fn sample_posterior(model: &ModelInstance, data: &Observations, cfg: &ChainConfig) -> Result<ChainOutput> {
    cfg.validate()?;
    model.validate()?;
    model.check_data(data)?;
    if let Some(init) = &cfg.init {
        model.check_theta(init)?;
    }
    match (model, data) {
        (ModelInstance::Gmm(m), Observations::Gmm { x }) => gmm_chain(model, m, x, cfg),
        (ModelInstance::Glmm(m), Observations::Glmm(d)) => glmm_chain(model, m, d, cfg),
        (ModelInstance::Sbm(m), Observations::Sbm(d)) => sbm_chain(model, m, d, cfg),
        _ => unreachable!("check_data rejects mismatched pairs"),
    }
}

fn gmm_chain(model: &ModelInstance, gm: &GmmModel, x: &[f64], cfg: &ChainConfig) -> Result<ChainOutput> {
    let k = gm.k;
    let n = x.len();
    let mut mu = match &cfg.init {
        Some(t) => t.clone(),
        None => {
            crate::meanfield::default_init(model, &Observations::Gmm { x: x.to_vec() })?
                .globals
                .means
        }
    };
    let prior_prec = 1.0 / (gm.prior_mean_sd * gm.prior_mean_sd);
    let mut rng = rng_from_seed(cfg.seed);
    let mut c = vec![0usize; n];
    let mut probs = vec![0.0; k];
    let keep_locals = n <= LOCAL_DRAW_LIMIT;
    let coords = model.coord_names();
    let (draws, local_draws, ess) = run_chain(
        cfg,
        coords.clone(),
        keep_locals,
        |_, _| {
            let mut sums = vec![0.0; k];
            let mut counts = vec![0.0; k];
            for (i, &xi) in x.iter().enumerate() {
                label_conditional(&mu, xi, &mut probs);
                c[i] = categorical(&probs, &mut rng);
                sums[c[i]] += xi;
                counts[c[i]] += 1.0;
            }
            for a in 0..k {
                let prec = prior_prec + counts[a];
                mu[a] = sums[a] / prec + normal(&mut rng) / prec.sqrt();
            }
            Ok((mu.clone(), c.iter().map(|&v| v as f64).collect()))
        },
        || {},
    )?;
    let moves = vec![
        MoveStats {
            name: "labels".into(),
            proposal_sd: None,
            acceptance_rate: 1.0,
        },
        MoveStats {
            name: "means".into(),
            proposal_sd: None,
            acceptance_rate: 1.0,
        },
    ];
    Ok(finish(coords, draws, local_draws, ess, moves, vec![1.0; k]))
}

/// Full conditional of one GMM label given the means.
pub fn label_conditional(mu: &[f64], x: f64, out: &mut [f64]) {
    crate::models::gmm::exact_responsibilities(mu, x, out);
}

fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// State of the GLMM chain with cached rate sums
/// `S_i = Σ_j exp(β_1·x_ij)`.
struct GlmmState<'a> {
    data: &'a GlmmData,
    d: usize,
    beta0: f64,
    beta1: Vec<f64>,
    rho: f64,
    u: Vec<f64>,
    w: Vec<f64>,
    sums: Vec<f64>,
    y_tot: Vec<f64>,
    /// `Σ_ij y_ij x_ijk`.
    lin: Vec<f64>,
    y_all: f64,
    beta_sd: f64,
    rho_sd: f64,
}

impl<'a> GlmmState<'a> {
    fn new(gm: &GlmmModel, data: &'a GlmmData, init: Option<&[f64]>) -> Self {
        let d = data.d;
        let y_tot: Vec<f64> = (0..data.m).map(|i| data.group_total(i) as f64).collect();
        let mut lin = vec![0.0; d];
        for i in 0..data.m {
            for j in 0..data.n {
                let y = data.count(i, j) as f64;
                for (l, xv) in lin.iter_mut().zip(data.covariates(i, j)) {
                    *l += y * xv;
                }
            }
        }
        let (beta0, beta1, rho, u) = match init {
            Some(t) => (t[0], t[1..=d].to_vec(), t[d + 1], vec![0.0; data.m]),
            None => {
                let logs: Vec<f64> = y_tot.iter().map(|y| (y / data.n as f64 + 0.5).ln()).collect();
                let b0 = if logs.is_empty() { 0.0 } else { mean(&logs) };
                let u: Vec<f64> = logs.iter().map(|l| l - b0).collect();
                let v = if u.len() > 1 { variance(&u) } else { 0.0 };
                (b0, vec![0.0; d], (v + 0.1).ln(), u)
            }
        };
        let mut s = GlmmState {
            data,
            d,
            beta0,
            beta1,
            rho,
            u,
            w: Vec::new(),
            sums: Vec::new(),
            y_all: y_tot.iter().sum(),
            y_tot,
            lin,
            beta_sd: gm.beta_prior_sd,
            rho_sd: gm.log_sigma2_prior_sd,
        };
        s.refresh();
        s
    }

    fn refresh(&mut self) {
        let data = self.data;
        self.w = (0..data.m * data.n)
            .map(|o| {
                let x = &data.x[o * self.d..(o + 1) * self.d];
                x.iter().zip(&self.beta1).map(|(a, b)| a * b).sum::<f64>().exp()
            })
            .collect();
        self.sums = (0..data.m)
            .map(|i| self.w[i * data.n..(i + 1) * data.n].iter().sum())
            .collect();
    }

    fn globals(&self) -> Vec<f64> {
        let mut g = vec![self.beta0];
        g.extend(&self.beta1);
        g.push(self.rho);
        g
    }

    fn u_logprior(&self, u: f64, rho: f64) -> f64 {
        -0.5 * rho - 0.5 * u * u * (-rho).exp()
    }
}

fn glmm_chain(model: &ModelInstance, gm: &GlmmModel, data: &GlmmData, cfg: &ChainConfig) -> Result<ChainOutput> {
    let d = data.d;
    let mut st = GlmmState::new(gm, data, cfg.init.as_deref());
    let mut rng = rng_from_seed(cfg.seed);
    let mut names = vec!["shift_beta0".to_string()];
    names.extend((1..=d).map(|k| format!("beta1_{k}")));
    names.push("log_sigma2".into());
    names.push("random_effects".into());
    let mut init_sds = cfg.initial_sds(d + 2)?;
    init_sds.push(0.5);
    let mut ad = Adapter::new(names, &init_sds);
    // per-group proposal scales adapt alongside the shared U counter
    let mut u_log_sd = vec![0.5f64.ln(); data.m];
    // compensation of β_0 for a β_1k move keeps the mean rate fixed at the start
    let total_w: f64 = st.sums.iter().zip(&st.u).map(|(s, u)| s * u.exp()).sum();
    let comp: Vec<f64> = (0..d)
        .map(|k| {
            if total_w <= 0.0 {
                return 0.0;
            }
            let mut acc = 0.0;
            for i in 0..data.m {
                for j in 0..data.n {
                    let o = i * data.n + j;
                    acc += st.w[o] * st.u[i].exp() * data.x[o * d + k];
                }
            }
            acc / total_w
        })
        .collect();
    let coords = model.coord_names();
    let ad_cell = std::cell::RefCell::new(&mut ad);
    let (draws, _, ess) = run_chain(
        cfg,
        coords.clone(),
        false,
        |step, adapting| {
            let mut ad = ad_cell.borrow_mut();
            let gain = (step as f64 + 1.0).powf(-0.6);
            let eb0 = st.beta0.exp();
            // random effects
            for i in 0..data.m {
                let old = st.u[i];
                let new = old + u_log_sd[i].exp() * normal(&mut rng);
                let lr = st.y_tot[i] * (new - old) - eb0 * st.sums[i] * (new.exp() - old.exp())
                    + st.u_logprior(new, st.rho)
                    - st.u_logprior(old, st.rho);
                let ok = metropolis_accept(lr, &mut rng);
                if ok {
                    st.u[i] = new;
                }
                ad.record(d + 2, ok, step, false);
                if adapting {
                    u_log_sd[i] += gain * ((ok as u8) as f64 - TARGET_ACCEPTANCE);
                }
            }
            // β_0 + s, U_i − s leaves every linear predictor unchanged
            {
                let s = ad.sd(0) * normal(&mut rng);
                let mut lr = normal_logpdf(st.beta0 + s, 0.0, st.beta_sd) - normal_logpdf(st.beta0, 0.0, st.beta_sd);
                for &u in &st.u {
                    lr += st.u_logprior(u - s, st.rho) - st.u_logprior(u, st.rho);
                }
                let ok = metropolis_accept(lr, &mut rng);
                if ok {
                    st.beta0 += s;
                    st.u.iter_mut().for_each(|u| *u -= s);
                }
                ad.record(0, ok, step, adapting);
            }
            // β_1k + s with β_0 − c_k s
            for k in 0..d {
                let s = ad.sd(1 + k) * normal(&mut rng);
                let b0_new = st.beta0 - comp[k] * s;
                let mut new_sums = vec![0.0; data.m];
                let mut rate_old = 0.0;
                let mut rate_new = 0.0;
                for i in 0..data.m {
                    let mut acc = 0.0;
                    for j in 0..data.n {
                        let o = i * data.n + j;
                        acc += st.w[o] * (s * data.x[o * d + k]).exp();
                    }
                    new_sums[i] = acc;
                    let eu = st.u[i].exp();
                    rate_old += st.sums[i] * eu;
                    rate_new += acc * eu;
                }
                let lr = s * st.lin[k] - comp[k] * s * st.y_all - b0_new.exp() * rate_new
                    + st.beta0.exp() * rate_old
                    + normal_logpdf(st.beta1[k] + s, 0.0, st.beta_sd)
                    - normal_logpdf(st.beta1[k], 0.0, st.beta_sd)
                    + normal_logpdf(b0_new, 0.0, st.beta_sd)
                    - normal_logpdf(st.beta0, 0.0, st.beta_sd);
                let ok = metropolis_accept(lr, &mut rng);
                if ok {
                    st.beta1[k] += s;
                    st.beta0 = b0_new;
                    for i in 0..data.m {
                        for j in 0..data.n {
                            let o = i * data.n + j;
                            st.w[o] *= (s * data.x[o * d + k]).exp();
                        }
                    }
                    st.sums = new_sums;
                }
                ad.record(1 + k, ok, step, adapting);
            }
            // log σ²
            {
                let s = ad.sd(d + 1) * normal(&mut rng);
                let new = st.rho + s;
                let ss: f64 = st.u.iter().map(|u| u * u).sum();
                let m = data.m as f64;
                let lr = -0.5 * m * s - 0.5 * ss * ((-new).exp() - (-st.rho).exp())
                    + normal_logpdf(new, 0.0, st.rho_sd)
                    - normal_logpdf(st.rho, 0.0, st.rho_sd);
                let ok = metropolis_accept(lr, &mut rng);
                if ok {
                    st.rho = new;
                }
                ad.record(d + 1, ok, step, adapting);
            }
            // products of many exponential updates drift; rebuild occasionally
            if step % 1000 == 999 {
                st.refresh();
            }
            Ok((st.globals(), Vec::new()))
        },
        || ad_cell.borrow_mut().reset_counts(),
    )?;
    let mut moves = ad.stats();
    // the random-effect move has per-group scales; report their geometric mean
    let gm_sd = (u_log_sd.iter().sum::<f64>() / u_log_sd.len().max(1) as f64).exp();
    moves[d + 2].proposal_sd = Some(gm_sd);
    let rates = moves[..d + 2].iter().map(|m| m.acceptance_rate).collect();
    Ok(finish(coords, draws, None, ess, moves, rates))
}

fn sbm_chain(model: &ModelInstance, sm: &SbmModel, data: &SbmData, cfg: &ChainConfig) -> Result<ChainOutput> {
    let k = sm.k;
    let n = data.n;
    let dim = sm.global_dim();
    let obs = Observations::Sbm(data.clone());
    // labels always start from the mean-field initializer's hard assignment
    let init = crate::meanfield::default_init(model, &obs)?;
    let (_, r) = init.locals.responsibilities().expect("sbm locals are responsibilities");
    let mut z: Vec<usize> = r
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, a| if row[a] > row[best] { a } else { best }))
        .collect();
    let mut theta = cfg.init.clone().unwrap_or(init.globals.means);
    let nbrs = data.neighbors();
    let mut rng = rng_from_seed(cfg.seed);
    let coords = model.coord_names();
    let mut ad = Adapter::new(coords.clone(), &cfg.initial_sds(dim)?);
    let keep_locals = n <= LOCAL_DRAW_LIMIT;
    let mut sizes = vec![0usize; k];
    for &a in &z {
        sizes[a] += 1;
    }
    let ad_cell = std::cell::RefCell::new(&mut ad);
    let (draws, local_draws, ess) = run_chain(
        cfg,
        coords.clone(),
        keep_locals,
        |step, adapting| {
            let mut ad = ad_cell.borrow_mut();
            let p = sm.unpack(&theta);
            let log_pi = p.log_pi();
            let sp: Vec<f64> = p.nu.iter().map(|&v| softplus(v)).collect();
            let mut logp = vec![0.0; k];
            let mut m_b = vec![0.0; k];
            for i in 0..n {
                sizes[z[i]] -= 1;
                m_b.iter_mut().for_each(|v| *v = 0.0);
                for &j in &nbrs[i] {
                    m_b[z[j]] += 1.0;
                }
                for a in 0..k {
                    let mut s = log_pi[a];
                    for b in 0..k {
                        s += m_b[b] * p.nu[a * k + b] - sizes[b] as f64 * sp[a * k + b];
                    }
                    logp[a] = s;
                }
                let l = log_sum_exp(&logp);
                let probs: Vec<f64> = logp.iter().map(|v| (v - l).exp()).collect();
                z[i] = categorical(&probs, &mut rng);
                sizes[z[i]] += 1;
            }
            let counts = block_counts(k, data, &z);
            let target = |t: &[f64]| -> f64 {
                let p = sm.unpack(t);
                let log_pi = p.log_pi();
                let mut s: f64 = (0..k).map(|a| counts.n_a[a] as f64 * log_pi[a]).sum();
                for ab in 0..k * k {
                    s += 0.5 * (counts.o_ab[ab] as f64 * p.nu[ab] - counts.n_ab[ab] as f64 * softplus(p.nu[ab]));
                }
                s + model.log_prior(t).unwrap_or(f64::NEG_INFINITY)
            };
            let mut lp = target(&theta);
            for j in 0..dim {
                let old = theta[j];
                theta[j] = old + ad.sd(j) * normal(&mut rng);
                let lp_new = target(&theta);
                let ok = metropolis_accept(lp_new - lp, &mut rng);
                if ok {
                    lp = lp_new;
                } else {
                    theta[j] = old;
                }
                ad.record(j, ok, step, adapting);
            }
            Ok((theta.clone(), z.iter().map(|&a| a as f64).collect()))
        },
        || ad_cell.borrow_mut().reset_counts(),
    )?;
    let mut moves = vec![MoveStats {
        name: "labels".into(),
        proposal_sd: None,
        acceptance_rate: 1.0,
    }];
    moves.extend(ad.stats());
    let rates = moves[1..].iter().map(|m| m.acceptance_rate).collect();
    Ok(finish(coords, draws, local_draws, ess, moves, rates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub coord: String,
    pub mean: f64,
    pub variance: f64,
    /// 5, 25, 50, 75 and 95 % quantiles.
    pub quantiles: [f64; 5],
    pub ess: f64,
}

pub const SUMMARY_PROBS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Moments and quantiles per coordinate. For exchangeable-label models
/// each draw is first relabeled to its closest permutation of a template,
/// starting from the first draw and iterating with the mean of the aligned
/// draws until the labelling is stable.
pub fn marginal_summary(chain: &ChainOutput, model: Option<&ModelInstance>) -> Result<Vec<MarginalSummary>> {
    if chain.draws.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::Insufficient(format!(
            "{} kept draws, need {MIN_SUMMARY_DRAWS}",
            chain.draws.len()
        )));
    }
    let draws = match model {
        Some(m) if m.label_classes().is_some() => relabel(m, &chain.draws)?,
        _ => chain.draws.clone(),
    };
    let d = chain.dim();
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let mut col: Vec<f64> = draws.iter().map(|r| r[c]).collect();
        let ess = effective_sample_size(&col);
        if ess < MIN_SUMMARY_ESS {
            return Err(Error::Insufficient(format!(
                "effective sample size {ess:.0} of {} is below {MIN_SUMMARY_ESS}",
                chain.coords[c]
            )));
        }
        let m = mean(&col);
        let v = variance(&col);
        col.sort_by(f64::total_cmp);
        out.push(MarginalSummary {
            coord: chain.coords[c].clone(),
            mean: m,
            variance: v,
            quantiles: SUMMARY_PROBS.map(|p| quantile_sorted(&col, p)),
            ess,
        });
    }
    Ok(out)
}

fn relabel(model: &ModelInstance, draws: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = draws[0].len();
    let mut template = draws[0].clone();
    let mut perms: Vec<Vec<usize>> = Vec::new();
    for _ in 0..RELABEL_MAX_PASSES {
        let mut aligned = Vec::with_capacity(draws.len());
        let mut new_perms = Vec::with_capacity(draws.len());
        for dr in draws {
            let (a, p) = align_estimate(model, dr, &template)?;
            aligned.push(a);
            new_perms.push(p);
        }
        template = (0..d)
            .map(|c| mean(&aligned.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .collect();
        let stable = new_perms == perms;
        perms = new_perms;
        if stable {
            return Ok(aligned);
        }
    }
    Err(Error::InvalidArgument("relabeling did not stabilize".into()))
}
