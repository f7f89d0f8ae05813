//! Command-line front end: configuration loading, the simulate / fit /
//! sample / diagnose / bench commands, and the serve / worker roles that
//! delegate to the distributed runtime. Every command is driven by one JSON
//! config file plus a handful of overriding flags, and every artifact it
//! writes is reproducible byte for byte from (config, seed); wall-clock
//! measurements are confined to `timing.json` and `bench.csv`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    dev_stats, mmd2_u_with_se, read_samples_csv, read_summary_csv, write_samples_csv,
    write_summary_csv, MarginalSummary,
};
use crate::engine::{fit, EpConfig, Posterior};
use crate::expfam::sample_inverse_wishart;
use crate::model::{
    load_dataset, seeded_rng, simulate_dataset, write_dataset, Dataset, Likelihood, ModelSpec,
    PriorSpec, SimConfig, STREAM_SAMPLE,
};
use crate::reference::dense_ep_fit;
use crate::{Error, Result};

/// Which process this invocation is: a self-contained fit, the central node
/// of a distributed fit, or a worker serving likelihood-site refinements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Local,
    Serve,
    Worker,
}

fn default_workers() -> usize {
    1
}

fn default_draws() -> usize {
    1000
}

/// One run's complete settings. `likelihood` and `seed` are mandatory;
/// everything else has a default or is needed only by specific commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub likelihood: Likelihood,
    /// Master seed; per-purpose generators are split off it by stream.
    pub seed: u64,
    /// Dataset CSV consumed by fit/serve and produced by simulate.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Defaults to the diffuse prior at the dataset's dimensions.
    #[serde(default)]
    pub priors: Option<PriorSpec>,
    #[serde(default)]
    pub ep: EpConfig,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub serve_addr: Option<String>,
    #[serde(default)]
    pub connect_addr: Option<String>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Settings for the simulate command.
    #[serde(default)]
    pub simulate: Option<SimConfig>,
    /// Draw count for the sample command.
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    /// Posterior artifact consumed by sample; defaults to
    /// `<out>/posterior.json`.
    #[serde(default)]
    pub posterior: Option<PathBuf>,
    /// Diagnose inputs: the approximation as draws or as a summary, and the
    /// reference as draws.
    #[serde(default)]
    pub approx_samples: Option<PathBuf>,
    #[serde(default)]
    pub approx_summary: Option<PathBuf>,
    #[serde(default)]
    pub ref_samples: Option<PathBuf>,
    /// Label prefixes diagnose aggregates over; empty string means all
    /// components. Defaults to every block the two inputs share.
    #[serde(default)]
    pub groups: Option<Vec<String>>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    /// Artifact directory; the --out flag overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ep.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.n_draws == 0 {
            return Err(Error::Config("n_draws must be at least 1".into()));
        }
        if let Some(sim) = &self.simulate {
            if sim.likelihood != self.likelihood {
                return Err(Error::Config(format!(
                    "simulate section uses {:?} but the model is {:?}",
                    sim.likelihood, self.likelihood
                )));
            }
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Timing grid for the bench command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Group counts to time.
    pub l_grid: Vec<usize>,
    pub reps: usize,
    /// Pass count is pinned so every cell does identical work per site.
    pub max_passes: usize,
    /// Time the sparse engine, the dense engine, or both.
    pub engines: Vec<BenchEngine>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            l_grid: (1..=9).map(|i| i * 100).collect(),
            reps: 5,
            max_passes: 2,
            engines: vec![BenchEngine::Sparse, BenchEngine::Dense],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchEngine {
    Sparse,
    Dense,
}

fn model_spec(cfg: &RunConfig, data: &Dataset) -> ModelSpec {
    let priors = match &cfg.priors {
        Some(p) => p.clone(),
        None => PriorSpec::diffuse(cfg.likelihood, data.p(), data.q()),
    };
    ModelSpec {
        likelihood: cfg.likelihood,
        priors,
    }
}

fn require_data(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::Config("config has no data path".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Simulates a dataset into `<out>/dataset.csv`, with the drawn parameters
/// alongside in `truth.json`, and returns the dataset path. The simulate
/// section's seed is replaced by the run seed.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let mut sim = cfg
        .simulate
        .clone()
        .ok_or_else(|| Error::Config("config has no simulate section".into()))?;
    sim.seed = cfg.seed;
    let (data, truth) = simulate_dataset(&sim)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("dataset.csv");
    write_dataset(&path, &data)?;
    write_text(&out.join("truth.json"), &crate::jsonio::to_string_17(&truth)?)?;
    Ok(path)
}

/// Per-component means and SDs covering the full parameter vector and then
/// the lower triangle of the group covariance (column-major), under the
/// fitted inverse-Wishart factor.
pub fn posterior_summary(post: &Posterior) -> Result<MarginalSummary> {
    let (mu, sd) = post.theta_summaries();
    let mut labels = post.layout.labels();
    labels.extend(post.layout.sigma_labels());
    let mut mean: Vec<f64> = mu.iter().copied().collect();
    let mut sds: Vec<f64> = sd.iter().copied().collect();
    let sigma_mean = post.sigma.mean()?;
    for j in 0..post.layout.q {
        for i in j..post.layout.q {
            mean.push(sigma_mean[(i, j)]);
            sds.push(post.sigma.var_entry(i, j)?.sqrt());
        }
    }
    MarginalSummary::new(
        labels,
        DVector::from_vec(mean),
        DVector::from_vec(sds),
    )
}

fn write_trace_csv(path: &Path, post: &Posterior) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "pass",
        "like_info",
        "like_prec",
        "re_info",
        "re_prec",
        "sigma_scale",
        "sigma_dof",
        "skip_like_cavity",
        "skip_like_tilted",
        "skip_like_moment",
        "skip_like_apply",
        "skip_re_cavity",
        "skip_re_moment",
        "skip_re_apply",
    ])?;
    for s in &post.trace {
        w.write_record([
            s.pass.to_string(),
            format!("{:.16e}", s.like_info),
            format!("{:.16e}", s.like_prec),
            format!("{:.16e}", s.re_info),
            format!("{:.16e}", s.re_prec),
            format!("{:.16e}", s.sigma_scale),
            format!("{:.16e}", s.sigma_dof),
            s.skips.like_cavity.to_string(),
            s.skips.like_tilted.to_string(),
            s.skips.like_moment.to_string(),
            s.skips.like_apply.to_string(),
            s.skips.re_cavity.to_string(),
            s.skips.re_moment.to_string(),
            s.skips.re_apply.to_string(),
        ])?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    elapsed_seconds: f64,
}

fn write_fit_artifacts(out: &Path, post: &Posterior, elapsed: f64) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_text(&out.join("posterior.json"), &crate::jsonio::to_string_17(post)?)?;
    write_summary_csv(&out.join("summary.csv"), &posterior_summary(post)?)?;
    write_trace_csv(&out.join("trace.csv"), post)?;
    write_text(
        &out.join("timing.json"),
        &serde_json::to_string_pretty(&Timing {
            elapsed_seconds: elapsed,
        })?,
    )?;
    Ok(())
}

/// Fits the configured model and writes `posterior.json`, `summary.csv`,
/// `trace.csv`, and `timing.json` under `out`. The local role runs in
/// process; serve drives remote workers; the worker role is rejected here.
pub fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<Posterior> {
    let data_path = require_data(cfg)?;
    if !data_path.exists() {
        return Err(Error::Config(format!(
            "dataset not found: {}",
            data_path.display()
        )));
    }
    let data = load_dataset(data_path, &probe_spec(cfg))?;
    let spec = model_spec(cfg, &data);
    let mut ep = cfg.ep;
    ep.seed = cfg.seed;
    let start = Instant::now();
    let post = match cfg.role {
        Role::Local => fit(&data, &spec, &ep)?,
        Role::Serve => {
            let addr = cfg
                .serve_addr
                .as_deref()
                .ok_or_else(|| Error::Config("serve role needs serve_addr".into()))?;
            let listener = std::net::TcpListener::bind(addr)?;
            std::fs::create_dir_all(out)?;
            crate::distributed::serve_central(
                &listener,
                &data,
                &spec,
                &ep,
                cfg.workers,
                Some(&out.join("partial.json")),
            )?
        }
        Role::Worker => {
            return Err(Error::Config(
                "fit cannot run in the worker role; use the worker command".into(),
            ))
        }
    };
    write_fit_artifacts(out, &post, start.elapsed().as_secs_f64())?;
    Ok(post)
}

/// The likelihood decides which extra dataset column to expect, so loading
/// needs only a spec skeleton with placeholder priors.
fn probe_spec(cfg: &RunConfig) -> ModelSpec {
    ModelSpec {
        likelihood: cfg.likelihood,
        priors: PriorSpec::diffuse(cfg.likelihood, 1, 1),
    }
}

/// Joint draws from the fitted approximation: the Gaussian factor for the
/// parameter vector and the inverse-Wishart factor for the group
/// covariance's lower triangle. Writes `<out>/samples.csv` with one row per
/// draw and returns its path.
pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let source = cfg
        .posterior
        .clone()
        .unwrap_or_else(|| out.join("posterior.json"));
    let text = std::fs::read_to_string(&source)
        .map_err(|e| Error::Config(format!("cannot read posterior {}: {e}", source.display())))?;
    let mut post: Posterior = serde_json::from_str(&text)?;
    post.rehydrate()?;
    let sampler = post.theta.sampler()?;
    let dim = sampler.dim();
    let q = post.layout.q;
    let mut labels = post.layout.labels();
    labels.extend(post.layout.sigma_labels());
    let mut rng = seeded_rng(cfg.seed, STREAM_SAMPLE);
    let mut draws = DMatrix::zeros(cfg.n_draws, labels.len());
    for row in 0..cfg.n_draws {
        let noise = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = sampler.draw(&noise);
        let sigma = sample_inverse_wishart(&post.sigma, &mut rng)?;
        for i in 0..dim {
            draws[(row, i)] = theta[i];
        }
        let mut col = dim;
        for j in 0..q {
            for i in j..q {
                draws[(row, col)] = sigma[(i, j)];
                col += 1;
            }
        }
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("samples.csv");
    write_samples_csv(&path, &labels, &draws)?;
    Ok(path)
}

fn load_approx_summary(cfg: &RunConfig) -> Result<MarginalSummary> {
    if let Some(path) = &cfg.approx_summary {
        return read_summary_csv(path);
    }
    if let Some(path) = &cfg.approx_samples {
        let (labels, draws) = read_samples_csv(path)?;
        return MarginalSummary::from_samples(labels, &draws);
    }
    Err(Error::Config(
        "diagnose needs approx_summary or approx_samples".into(),
    ))
}

/// Prefixes worth reporting when the config does not name any: everything,
/// then each block both summaries cover.
fn shared_groups(approx: &MarginalSummary, reference: &MarginalSummary) -> Vec<String> {
    let candidates = ["", "u[", "lambda", "gamma[", "beta[", "sigma["];
    candidates
        .iter()
        .filter(|prefix| dev_stats(approx, reference, prefix).is_ok())
        .map(|p| p.to_string())
        .collect()
}

/// Scores the approximation against reference draws and writes
/// `<out>/metrics.csv` in long form (metric, group, value). Deviation
/// summaries are computed per group prefix; when the approximation is given
/// as draws with the same components, the squared-discrepancy estimate and
/// its standard error are appended.
pub fn cmd_diagnose(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let ref_path = cfg
        .ref_samples
        .as_ref()
        .ok_or_else(|| Error::Config("diagnose needs ref_samples".into()))?;
    let (ref_labels, ref_draws) = read_samples_csv(ref_path)?;
    let reference = MarginalSummary::from_samples(ref_labels.clone(), &ref_draws)?;
    let approx = load_approx_summary(cfg)?;

    let groups = match &cfg.groups {
        Some(g) => g.clone(),
        None => shared_groups(&approx, &reference),
    };
    std::fs::create_dir_all(out)?;
    let path = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["metric", "group", "value"])?;
    let name = |prefix: &str| {
        if prefix.is_empty() {
            "all".to_string()
        } else {
            prefix.trim_end_matches('[').to_string()
        }
    };
    for prefix in &groups {
        let d = dev_stats(&approx, &reference, prefix)?;
        let g = name(prefix);
        for (metric, value) in [
            ("dev_mu", d.dev_mu),
            ("adev_mu", d.adev_mu),
            ("dev_sigma", d.dev_sigma),
            ("adev_sigma", d.adev_sigma),
            ("n_components", d.n_components as f64),
        ] {
            w.write_record([metric, &g, &format!("{value:.16e}")])?;
        }
    }
    if let Some(approx_path) = &cfg.approx_samples {
        let (labels, draws) = read_samples_csv(approx_path)?;
        if labels == ref_labels {
            let m = draws.nrows().min(ref_draws.nrows());
            let (v, se) = mmd2_u_with_se(
                &draws.rows(0, m).into_owned(),
                &ref_draws.rows(0, m).into_owned(),
            )?;
            w.write_record(["mmd2u", "all", &format!("{v:.16e}")])?;
            w.write_record(["mmd2u_se", "all", &format!("{se:.16e}")])?;
        }
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(path)
}

fn mean_sd(times: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Times full fits over a grid of group counts at the simulation study's
/// settings (10 observations per group, 8 fixed effects, bivariate group
/// effects) and writes `<out>/bench.csv` with mean and SD over repetitions.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let bench = cfg.bench.clone().unwrap_or_default();
    if bench.l_grid.is_empty() || bench.reps == 0 || bench.engines.is_empty() {
        return Err(Error::Config(
            "bench needs a nonempty l_grid, engines, and reps >= 1".into(),
        ));
    }
    let mut ep = cfg.ep;
    ep.seed = cfg.seed;
    ep.max_passes = bench.max_passes;
    ep.min_passes = ep.min_passes.min(bench.max_passes);
    std::fs::create_dir_all(out)?;
    let path = out.join("bench.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["model", "engine", "n_groups", "reps", "mean_seconds", "sd_seconds"])?;
    let model_name = match cfg.likelihood {
        Likelihood::Zip => "zip",
        Likelihood::BinomialProbit => "binomial-probit",
    };
    for &l in &bench.l_grid {
        let mut sim = SimConfig::study_defaults(cfg.likelihood, l, 0);
        sim.seed = cfg.seed.wrapping_add(l as u64);
        let (data, _) = simulate_dataset(&sim)?;
        let spec = model_spec(cfg, &data);
        for &engine in &bench.engines {
            let mut times = Vec::with_capacity(bench.reps);
            for _ in 0..bench.reps {
                let start = Instant::now();
                match engine {
                    BenchEngine::Sparse => {
                        fit(&data, &spec, &ep)?;
                    }
                    BenchEngine::Dense => {
                        dense_ep_fit(&data, &spec, &ep)?;
                    }
                }
                times.push(start.elapsed().as_secs_f64());
            }
            let (mean, sd) = mean_sd(&times);
            let engine_name = match engine {
                BenchEngine::Sparse => "sparse",
                BenchEngine::Dense => "dense",
            };
            w.write_record([
                model_name,
                engine_name,
                &l.to_string(),
                &bench.reps.to_string(),
                &format!("{mean:.6e}"),
                &format!("{sd:.6e}"),
            ])?;
        }
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(path)
}

/// Connects to a central node and serves likelihood-site refinements until
/// shut down.
pub fn cmd_worker(addr: &str) -> Result<()> {
    crate::distributed::run_worker(addr)
}

#[derive(Parser, Debug)]
#[command(
    name = "epmix",
    version,
    about = "Sparse expectation propagation for mixed-effects regression"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Draw a synthetic dataset from the config's simulate section.
    Simulate(CommonArgs),
    /// Fit the model (local, or distributed per the config role).
    Fit(CommonArgs),
    /// Draw joint posterior samples from fit artifacts.
    Sample(CommonArgs),
    /// Score an approximation against reference draws.
    Diagnose(CommonArgs),
    /// Time sparse and dense fits over a grid of group counts.
    Bench(CommonArgs),
    /// Run the central node of a distributed fit.
    Serve(CommonArgs),
    /// Run a distributed-fit worker.
    Worker(CommonArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Pass schedule override: sequential or parallel.
    #[arg(long)]
    schedule: Option<String>,
    /// Central-node address a worker connects to.
    #[arg(long)]
    connect: Option<String>,
    /// Address the central node listens on.
    #[arg(long)]
    serve: Option<String>,
    /// Worker count the central node waits for.
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut cfg = load_config(path)?;
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if self.connect.is_some() && self.serve.is_some() {
            return Err(Error::Config(
                "--connect and --serve are mutually exclusive".into(),
            ));
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = &self.schedule {
            cfg.ep.schedule = s.parse()?;
        }
        if let Some(addr) = &self.serve {
            cfg.serve_addr = Some(addr.clone());
            cfg.role = Role::Serve;
        }
        if let Some(addr) = &self.connect {
            cfg.connect_addr = Some(addr.clone());
            cfg.role = Role::Worker;
        }
        if let Some(k) = self.workers {
            cfg.workers = k;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        Ok(())
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

fn worker_addr(args: &CommonArgs) -> Result<String> {
    if let Some(addr) = &args.connect {
        return Ok(addr.clone());
    }
    if let Some(path) = args.config.as_deref() {
        let mut cfg = load_config(path)?;
        args.apply(&mut cfg)?;
        if let Some(addr) = cfg.connect_addr {
            return Ok(addr);
        }
    }
    Err(Error::Config(
        "worker needs --connect ADDR (or connect_addr in the config)".into(),
    ))
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.verb {
        Verb::Simulate(a) => {
            let cfg = a.load()?;
            cmd_simulate(&cfg, &a.out_dir(&cfg))?;
        }
        Verb::Fit(a) => {
            let mut cfg = a.load()?;
            if cfg.role == Role::Worker {
                return cmd_worker(&worker_addr(a)?);
            }
            if cfg.role == Role::Serve && cfg.serve_addr.is_none() {
                return Err(Error::Config("serve role needs serve_addr or --serve".into()));
            }
            let out = a.out_dir(&cfg);
            if cfg.data.is_none() {
                // Convenience: fit straight after simulate in the same dir.
                let candidate = out.join("dataset.csv");
                if candidate.exists() {
                    cfg.data = Some(candidate);
                }
            }
            cmd_fit(&cfg, &out)?;
        }
        Verb::Sample(a) => {
            let cfg = a.load()?;
            cmd_sample(&cfg, &a.out_dir(&cfg))?;
        }
        Verb::Diagnose(a) => {
            let cfg = a.load()?;
            cmd_diagnose(&cfg, &a.out_dir(&cfg))?;
        }
        Verb::Bench(a) => {
            let cfg = a.load()?;
            cmd_bench(&cfg, &a.out_dir(&cfg))?;
        }
        Verb::Serve(a) => {
            let mut cfg = a.load()?;
            cfg.role = Role::Serve;
            if cfg.serve_addr.is_none() {
                return Err(Error::Config("serve needs --serve ADDR".into()));
            }
            cmd_fit(&cfg, &a.out_dir(&cfg))?;
        }
        Verb::Worker(a) => return cmd_worker(&worker_addr(a)?),
    }
    Ok(())
}

/// Binary entry point: parses arguments, runs the command, and maps errors
/// to exit codes (2 config, 3 numerical, 4 protocol).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
