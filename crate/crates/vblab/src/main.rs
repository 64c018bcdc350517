use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vblab::config::ExperimentConfig;
use vblab::experiment::read_records_csv;
use vblab::output::{report_json, write_atomic, write_report, REPORT_FILE};
use vblab::{resolve_jobs, run_experiment, ExperimentReport};
use vblab_core::meanfield::{default_init, fit_vb};
use vblab_core::models::{CovariateLaw, Dataset, GlmmModel, GmmModel, Observations, SbmModel};
use vblab_core::numeric::stats::{mean, rmse};
use vblab_core::rng::RNG_ID;
use vblab_core::sampler::{marginal_summary, sample_posterior, ChainConfig};
use vblab_core::vb_ideal::{ideal_vs_vb_gap, GridOptions};
use vblab_core::vfe::{default_h_grid, default_vfe_init, fit_vfe, lan_expansion_probe, write_lan_csv};
use vblab_core::ModelInstance;

/// Exit status for usage and configuration errors.
const EXIT_USAGE: u8 = 2;
const EXIT_CHECKS_FAILED: u8 = 1;
const EXIT_TOO_MANY_FAILURES: u8 = 3;

fn long_version() -> &'static str {
    Box::leak(format!("{}\nrng: {RNG_ID}", env!("CARGO_PKG_VERSION")).into_boxed_str())
}

#[derive(Parser)]
#[command(name = "vblab", version, long_version = long_version(), about = "Mean-field VB, variational EM and asymptotic checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Gmm,
    Glmm,
    Sbm,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to VBLAB_JOBS, else 1.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Components (mixture) or blocks (block model).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Dataset JSON written by `simulate`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the dataset of every (size, replication) in a config, or one
    /// dataset with `--size`.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Fit mean-field VB and print the result as JSON.
    FitVb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Fit the variational frequentist estimate and print it as JSON.
    FitVfe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Compare VB with the grid VB ideal.
    Ideal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, default_value_t = GridOptions::default().points)]
        points: usize,
    },
    /// Run the reference sampler; draws go to `--out` as CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long, default_value_t = 10_000)]
        burn_in: usize,
        #[arg(long, default_value_t = 10)]
        thin: usize,
    },
    /// LAN probe over the sizes and replications of a config.
    CheckLan {
        #[command(flatten)]
        common: Common,
    },
    /// Full experiment: writes report.json and records.csv.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize an experiment output directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding report.json and records.csv.
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config <path> is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read data {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed data {}", path.display()))
}

/// Model from the flags, sized to the data; the dataset's own model otherwise.
fn resolve_model(m: &ModelArgs, ds: &Dataset) -> anyhow::Result<ModelInstance> {
    let model = match (m.model, &ds.data) {
        (None, _) => ds.model.clone(),
        (Some(ModelKind::Gmm), Observations::Gmm { x }) => ModelInstance::Gmm(GmmModel::new(m.k, x.len())),
        (Some(ModelKind::Sbm), Observations::Sbm(d)) => ModelInstance::Sbm(SbmModel::new(m.k, d.n)),
        (Some(ModelKind::Glmm), Observations::Glmm(d)) => match &ds.model {
            ModelInstance::Glmm(g) => ModelInstance::Glmm(g.clone()),
            _ => ModelInstance::Glmm(GlmmModel::new(d.m, d.n, vec![CovariateLaw::StandardNormal; d.d])),
        },
        (Some(_), data) => bail!(
            "--model does not match the {} data in {}",
            data.kind(),
            m.data.display()
        ),
    };
    model.check_data(&ds.data)?;
    Ok(model)
}

fn emit(text: &str, out: Option<&Path>, file: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            let path = dir.join(file);
            write_atomic(&path, |w| w.write_all(text.as_bytes()))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Mixture data as one `x` column; block data as an edge list.
fn write_data_csv(data: &Observations, mut w: impl std::io::Write) -> std::io::Result<()> {
    match data {
        Observations::Gmm { x } => {
            writeln!(w, "x")?;
            for v in x {
                writeln!(w, "{v}")?;
            }
            Ok(())
        }
        Observations::Glmm(d) => d.write_csv(w),
        Observations::Sbm(d) => {
            writeln!(w, "i,j")?;
            for i in 0..d.n {
                for j in i + 1..d.n {
                    if d.edge(i, j) {
                        writeln!(w, "{},{}", i + 1, j + 1)?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Simulate { common, size } => {
            let cfg = load_config(&common)?;
            let sizes = size.map_or(cfg.sizes.clone(), |s| vec![s]);
            let dir = common.out.clone().or(cfg.output_dir.clone());
            for &n in &sizes {
                for rep in 0..cfg.replications {
                    let ds = vblab::experiment::replication_dataset(&cfg, n, rep)?;
                    let text = match common.format {
                        Format::Json => to_json(&ds),
                        Format::Csv => {
                            let mut buf = Vec::new();
                            write_data_csv(&ds.data, &mut buf)?;
                            String::from_utf8(buf)?
                        }
                    };
                    let ext = if common.format == Format::Json { "json" } else { "csv" };
                    emit(&text, dir.as_deref(), &format!("data_n{n}_rep{rep}.{ext}"))?;
                }
            }
        }
        Cmd::FitVb { common, m, tol } => {
            let ds = load_dataset(&m.data)?;
            let model = resolve_model(&m, &ds)?;
            let r = fit_vb(&model, &ds.data, default_init(&model, &ds.data)?, tol, 100_000)?;
            match common.format {
                Format::Json => emit(&(r.to_json() + "\n"), common.out.as_deref(), "vb.json")?,
                Format::Csv => {
                    let mut buf = Vec::new();
                    r.write_elbo_csv(&mut buf)?;
                    emit(&String::from_utf8(buf)?, common.out.as_deref(), "elbo.csv")?
                }
            }
        }
        Cmd::FitVfe { common, m, tol } => {
            let ds = load_dataset(&m.data)?;
            let model = resolve_model(&m, &ds)?;
            let init = default_vfe_init(&model, &ds.data)?;
            let r = fit_vfe(&model, &ds.data, &init, tol, 100_000)?;
            emit(&to_json(&r), common.out.as_deref(), "vfe.json")?;
        }
        Cmd::Ideal { common, m, points } => {
            let ds = load_dataset(&m.data)?;
            let model = resolve_model(&m, &ds)?;
            let opts = GridOptions {
                points,
                ..GridOptions::default()
            };
            let g = ideal_vs_vb_gap(&model, &ds.data, opts)?;
            emit(&to_json(&g), common.out.as_deref(), "ideal.json")?;
        }
        Cmd::Sample {
            common,
            m,
            steps,
            burn_in,
            thin,
        } => {
            let ds = load_dataset(&m.data)?;
            let model = resolve_model(&m, &ds)?;
            let cfg = ChainConfig::new(steps, burn_in, thin, common.seed.unwrap_or(ds.seed));
            let chain = sample_posterior(&model, &ds.data, &cfg)?;
            if chain.acceptance_warning {
                eprintln!("warning: a Metropolis move ended outside the acceptance window");
            }
            if let Some(dir) = &common.out {
                write_atomic(&dir.join("draws.csv"), |w| chain.write_csv(w))?;
            }
            let summary = marginal_summary(&chain, Some(&model));
            let body = serde_json::json!({
                "moves": chain.moves,
                "ess": chain.ess,
                "acceptance_warning": chain.acceptance_warning,
                "summary": summary.as_ref().ok(),
                "summary_error": summary.as_ref().err().map(|e| e.to_string()),
            });
            emit(&to_json(&body), common.out.as_deref(), "sample.json")?;
        }
        Cmd::CheckLan { common } => {
            let cfg = load_config(&common)?;
            let rows = lan_expansion_probe(
                &cfg.model,
                &cfg.theta0,
                &default_h_grid(cfg.theta0.len()),
                &cfg.sizes,
                cfg.replications,
                cfg.seed,
            )?;
            let text = match common.format {
                Format::Csv => {
                    let mut buf = Vec::new();
                    write_lan_csv(&rows, &mut buf)?;
                    String::from_utf8(buf)?
                }
                Format::Json => to_json(&rows),
            };
            let ext = if common.format == Format::Json { "json" } else { "csv" };
            emit(&text, common.out.as_deref(), &format!("lan.{ext}"))?;
        }
        Cmd::Experiment { common } => {
            let cfg = load_config(&common)?;
            let jobs = resolve_jobs(common.jobs.or(cfg.jobs));
            let report = run_experiment(&cfg, jobs)?;
            match &cfg.output_dir {
                Some(dir) => {
                    let (r, c) = write_report(&report, dir)?;
                    eprintln!("wrote {} and {}", r.display(), c.display());
                }
                None => print!("{}", report_json(&report)),
            }
            print_verdicts(&report);
            if report.too_many_failures() {
                eprintln!(
                    "{:.1}% of fits failed (limit {:.0}%)",
                    100.0 * report.failure_fraction,
                    100.0 * vblab::experiment::MAX_FAILURE_FRACTION
                );
                return Ok(ExitCode::from(EXIT_TOO_MANY_FAILURES));
            }
            if !report.pass {
                return Ok(ExitCode::from(EXIT_CHECKS_FAILED));
            }
        }
        Cmd::Report { common, dir } => {
            let path = dir.join(REPORT_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let report: ExperimentReport =
                serde_json::from_str(&text).with_context(|| format!("malformed report {}", path.display()))?;
            print_verdicts(&report);
            let csv_path = dir.join(vblab::output::RECORDS_FILE);
            let file = std::fs::File::open(&csv_path).with_context(|| format!("cannot read {}", csv_path.display()))?;
            let records = read_records_csv(file)?;
            let summary = summarize(&records);
            match common.format {
                Format::Json => print!("{}", to_json(&summary)),
                Format::Csv => {
                    println!("estimator,n,coord,reps,mean_error,rmse");
                    for s in &summary {
                        println!(
                            "{},{},{},{},{},{}",
                            s.estimator, s.n, s.coord, s.reps, s.mean_error, s.rmse
                        );
                    }
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_verdicts(report: &ExperimentReport) {
    for v in &report.verdicts {
        eprintln!("{:<24} {}", v.check, if v.pass { "pass" } else { "FAIL" });
    }
}

#[derive(serde::Serialize)]
struct SummaryRow {
    estimator: String,
    n: usize,
    coord: String,
    reps: usize,
    mean_error: f64,
    rmse: f64,
}

/// Bias and RMSE of each point estimator per size and coordinate.
fn summarize(records: &[vblab::Record]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for r in records.iter().filter(|r| r.error.is_some()) {
        let k = (r.estimator.clone(), r.n, r.coord.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(estimator, n, coord)| {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.estimator == estimator && r.n == n && r.coord == coord)
                .filter_map(|r| r.error)
                .collect();
            SummaryRow {
                reps: errs.len(),
                mean_error: mean(&errs),
                rmse: rmse(&errs),
                estimator,
                n,
                coord,
            }
        })
        .collect()
}
