//! Model specification, parameter layout, dataset ingestion, and simulation.
//!
//! The regression state is `theta = (u_1, ..., u_L, gamma, beta)`: one
//! random-effect vector of length `Q` per group, `H` model hyperparameters
//! shared by every likelihood term (the zero-inflation logit for ZIP, nothing
//! for binomial-probit), and `P` fixed effects. [`ParamLayout`] pins the block
//! offsets inside that vector; everything downstream indexes through it.
//!
//! Datasets travel as CSV with header `group,y,<extra>,x1..xP,z1..zQ` where
//! `<extra>` is `offset` (ZIP) or `trials` (binomial). Column order does not
//! matter; the extra column may be absent, in which case offsets default to 0
//! and trial counts to 1. Group labels are arbitrary strings remapped to dense
//! indices in first-appearance order, with the mapping kept on the dataset.

use std::collections::HashMap;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::expfam::{is_pd, reduction_matrix, ReductionMap};
use crate::likelihoods::{log_phi, ObsKernel};
use crate::{Error, Result};

/// Stream ids for [`seeded_rng`]; one per randomized purpose so each is
/// independently reproducible from a single user-facing seed.
pub const STREAM_SIMULATE: u64 = 1;
pub const STREAM_SAMPLE: u64 = 2;
pub const STREAM_MCMC: u64 = 3;
pub const STREAM_ORACLE: u64 = 4;

/// ChaCha generator pinned to (seed, stream). Identical arguments produce an
/// identical draw sequence on every platform.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    /// Zero-inflated Poisson counts with a log link and per-observation offset.
    Zip,
    /// Binomial counts with a probit link and per-observation trial count.
    BinomialProbit,
}

impl Likelihood {
    /// Number of shared model hyperparameters riding along in every
    /// likelihood site (the zero-inflation logit counts as one).
    pub fn hyper_dim(self) -> usize {
        match self {
            Likelihood::Zip => 1,
            Likelihood::BinomialProbit => 0,
        }
    }

    /// Header name of the per-observation extra column in dataset files.
    pub fn extra_column(self) -> &'static str {
        match self {
            Likelihood::Zip => "offset",
            Likelihood::BinomialProbit => "trials",
        }
    }
}

/// Prior hyperparameters. `hyper_*` blocks are empty when the likelihood has
/// no shared hyperparameters. In JSON, vectors are plain arrays and matrices
/// are arrays of rows, since these are written by hand in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(with = "crate::jsonio::dvector_rows")]
    pub hyper_mean: DVector<f64>,
    #[serde(with = "crate::jsonio::dmatrix_rows")]
    pub hyper_cov: DMatrix<f64>,
    #[serde(with = "crate::jsonio::dvector_rows")]
    pub fixed_mean: DVector<f64>,
    #[serde(with = "crate::jsonio::dmatrix_rows")]
    pub fixed_cov: DMatrix<f64>,
    #[serde(with = "crate::jsonio::dmatrix_rows")]
    pub re_scale: DMatrix<f64>,
    pub re_dof: f64,
}

impl PriorSpec {
    /// Diffuse defaults used throughout the simulation studies: zero means,
    /// covariance 10000 (times identity), re_scale identity, re_dof Q+2.
    pub fn diffuse(likelihood: Likelihood, p: usize, q: usize) -> Self {
        let h = likelihood.hyper_dim();
        PriorSpec {
            hyper_mean: DVector::zeros(h),
            hyper_cov: DMatrix::identity(h, h) * 1e4,
            fixed_mean: DVector::zeros(p),
            fixed_cov: DMatrix::identity(p, p) * 1e4,
            re_scale: DMatrix::identity(q, q),
            re_dof: q as f64 + 2.0,
        }
    }

    pub fn validate(&self, q: usize, p: usize, h: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hyper_mean.len() != h || self.hyper_cov.shape() != (h, h) {
            return bad(format!("prior hyper block must have dimension {h}"));
        }
        if h > 0 && !is_pd(&self.hyper_cov) {
            return bad("prior hyper_cov is not positive definite".into());
        }
        if self.fixed_mean.len() != p || self.fixed_cov.shape() != (p, p) {
            return bad(format!("prior fixed block must have dimension {p}"));
        }
        if p > 0 && !is_pd(&self.fixed_cov) {
            return bad("prior fixed_cov is not positive definite".into());
        }
        if self.re_scale.shape() != (q, q) {
            return bad(format!("prior re_scale must be {q}x{q}"));
        }
        if !is_pd(&self.re_scale) {
            return bad("prior re_scale is not positive definite".into());
        }
        if !(self.re_dof > q as f64 - 1.0) {
            return bad(format!("prior re_dof must exceed Q-1 = {}", q as f64 - 1.0));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub likelihood: Likelihood,
    pub priors: PriorSpec,
}

/// Per-observation extras; the variant must match the likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extras {
    Offsets(Vec<f64>),
    Trials(Vec<u64>),
}

/// Validated observations. Parallel arrays indexed by observation; group
/// indices are dense 0-based after label remapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub group_of: Vec<usize>,
    pub group_labels: Vec<String>,
    pub y: Vec<u64>,
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub extras: Extras,
}

impl Dataset {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn p(&self) -> usize {
        self.x.first().map_or(0, |v| v.len())
    }

    pub fn q(&self) -> usize {
        self.z.first().map_or(0, |v| v.len())
    }

    /// Tilted-kernel description for observation `n`.
    pub fn kernel(&self, n: usize) -> ObsKernel {
        match &self.extras {
            Extras::Offsets(o) => ObsKernel::Zip { y: self.y[n], offset: o[n] },
            Extras::Trials(t) => ObsKernel::BinomialProbit { y: self.y[n], trials: t[n] },
        }
    }

    /// Observation indices per group, in dataset order.
    pub fn group_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_groups()];
        for (n, &l) in self.group_of.iter().enumerate() {
            rows[l].push(n);
        }
        rows
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::Config("dataset has no observations".into()));
        }
        let l = self.group_labels.len();
        if self.group_of.len() != n || self.x.len() != n || self.z.len() != n {
            return Err(Error::Config("dataset arrays have mismatched lengths".into()));
        }
        if self.group_of.iter().any(|&g| g >= l) {
            return Err(Error::Config("group index out of range".into()));
        }
        let (p, q) = (self.p(), self.q());
        if q == 0 {
            return Err(Error::Config("at least one random covariate z1 is required".into()));
        }
        if self.x.iter().any(|v| v.len() != p) || self.z.iter().any(|v| v.len() != q) {
            return Err(Error::Config("covariate rows have mismatched lengths".into()));
        }
        match &self.extras {
            Extras::Offsets(o) if o.len() != n => {
                return Err(Error::Config("offset array length mismatch".into()))
            }
            Extras::Trials(t) => {
                if t.len() != n {
                    return Err(Error::Config("trials array length mismatch".into()));
                }
                for (i, (&tr, &y)) in t.iter().zip(&self.y).enumerate() {
                    if tr == 0 {
                        return Err(Error::Config(format!("observation {i}: trials must be positive")));
                    }
                    if tr < y {
                        return Err(Error::Config(format!(
                            "observation {i}: trials < response ({tr} < {y})"
                        )));
                    }
                }
            }
            _ => {}
        }
        // Dense relabeling guarantees every group in 0..L has a row.
        let mut seen = vec![false; l];
        for &g in &self.group_of {
            seen[g] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("a group label has no observations".into()));
        }
        Ok(())
    }
}

/// Block offsets inside the stacked parameter vector
/// `(u_1, ..., u_L, gamma, beta)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub n_groups: usize,
    pub q: usize,
    pub h: usize,
    pub p: usize,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.n_groups * self.q + self.h + self.p
    }

    /// Dimension of the shared tail (gamma, beta).
    pub fn shared_dim(&self) -> usize {
        self.h + self.p
    }

    pub fn u_range(&self, l: usize) -> Range<usize> {
        debug_assert!(l < self.n_groups);
        l * self.q..(l + 1) * self.q
    }

    pub fn hyper_range(&self) -> Range<usize> {
        let s = self.n_groups * self.q;
        s..s + self.h
    }

    pub fn fixed_range(&self) -> Range<usize> {
        let s = self.n_groups * self.q + self.h;
        s..s + self.p
    }

    pub fn shared_range(&self) -> Range<usize> {
        self.n_groups * self.q..self.dim()
    }

    /// Human-readable component labels covering the full vector, in order:
    /// `u[l][k]` (1-based), then `lambda` (or `gamma[i]`), then `beta[j]`.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for l in 1..=self.n_groups {
            for k in 1..=self.q {
                out.push(format!("u[{l}][{k}]"));
            }
        }
        if self.h == 1 {
            out.push("lambda".to_string());
        } else {
            for i in 1..=self.h {
                out.push(format!("gamma[{i}]"));
            }
        }
        for j in 1..=self.p {
            out.push(format!("beta[{j}]"));
        }
        out
    }

    /// Labels for the lower triangle of the random-effects covariance in
    /// column-major (vech) order.
    pub fn sigma_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for j in 1..=self.q {
            for i in j..=self.q {
                out.push(format!("sigma[{i}][{j}]"));
            }
        }
        out
    }
}

pub fn layout_of(spec: &ModelSpec, data: &Dataset) -> Result<ParamLayout> {
    if data.n_groups() == 0 {
        return Err(Error::Config("dataset has no groups".into()));
    }
    match (&data.extras, spec.likelihood) {
        (Extras::Offsets(_), Likelihood::Zip) | (Extras::Trials(_), Likelihood::BinomialProbit) => {}
        _ => return Err(Error::Config("dataset extras do not match the likelihood".into())),
    }
    let layout = ParamLayout {
        n_groups: data.n_groups(),
        q: data.q(),
        h: spec.likelihood.hyper_dim(),
        p: data.p(),
    };
    spec.priors.validate(layout.q, layout.p, layout.h)?;
    Ok(layout)
}

/// Per-observation lifting maps from the reduced refinement coordinates to
/// the `(u_l, gamma, beta)` block, in data order.
pub fn reduction_maps(data: &Dataset, layout: &ParamLayout) -> Vec<ReductionMap> {
    (0..data.n_obs())
        .map(|n| reduction_matrix(&data.z[n], &data.x[n], layout.h))
        .collect()
}

/// Indexed covariate columns (`x1..xP` or `z1..zQ`) must be contiguous from 1.
fn covariate_count(kind: char, mut numbers: Vec<usize>) -> Result<usize> {
    numbers.sort_unstable();
    for (i, &n) in numbers.iter().enumerate() {
        if n != i + 1 {
            return Err(Error::Config(format!(
                "covariate columns must be named {kind}1..{kind}K without gaps"
            )));
        }
    }
    Ok(numbers.len())
}

pub fn load_dataset(path: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();

    let extra_name = spec.likelihood.extra_column();
    let mut col_group = None;
    let mut col_y = None;
    let mut col_extra = None;
    let mut x_cols = Vec::new();
    let mut z_cols = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        match name {
            "group" => col_group = Some(i),
            "y" => col_y = Some(i),
            _ if name == extra_name => col_extra = Some(i),
            _ => {
                let (kind, rest) = name.split_at(1.min(name.len()));
                match (kind, rest.parse::<usize>()) {
                    ("x", Ok(k)) if k > 0 => x_cols.push((k, i)),
                    ("z", Ok(k)) if k > 0 => z_cols.push((k, i)),
                    _ => {
                        return Err(Error::Config(format!(
                            "unrecognized column '{name}' in {}",
                            path.display()
                        )))
                    }
                }
            }
        }
    }
    let col_group =
        col_group.ok_or_else(|| Error::Config("missing column 'group'".into()))?;
    let col_y = col_y.ok_or_else(|| Error::Config("missing column 'y'".into()))?;
    let p = covariate_count('x', x_cols.iter().map(|&(k, _)| k).collect())?;
    let q = covariate_count('z', z_cols.iter().map(|&(k, _)| k).collect())?;
    if q == 0 {
        return Err(Error::Config("missing column 'z1'".into()));
    }
    x_cols.sort_unstable();
    z_cols.sort_unstable();

    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut group_labels = Vec::new();
    let mut group_of = Vec::new();
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut offsets = Vec::new();
    let mut trials = Vec::new();

    let parse_f64 = |v: &str, line: usize, col: &str| -> Result<f64> {
        v.parse::<f64>().map_err(|_| {
            Error::Config(format!("line {line}: non-numeric value '{v}' in column '{col}'"))
        })
    };
    let parse_u64 = |v: &str, line: usize, col: &str| -> Result<u64> {
        v.parse::<u64>().map_err(|_| {
            Error::Config(format!(
                "line {line}: value '{v}' in column '{col}' is not a nonnegative integer"
            ))
        })
    };

    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row_idx + 2;
        let get = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Config(format!("line {line}: too few fields")))
        };

        let label = get(col_group)?.to_string();
        let next = label_index.len();
        let l = *label_index.entry(label.clone()).or_insert_with(|| {
            group_labels.push(label);
            next
        });
        group_of.push(l);
        ys.push(parse_u64(get(col_y)?, line, "y")?);
        match (spec.likelihood, col_extra) {
            (Likelihood::Zip, Some(c)) => offsets.push(parse_f64(get(c)?, line, extra_name)?),
            (Likelihood::Zip, None) => offsets.push(0.0),
            (Likelihood::BinomialProbit, Some(c)) => {
                trials.push(parse_u64(get(c)?, line, extra_name)?)
            }
            (Likelihood::BinomialProbit, None) => trials.push(1),
        }
        let mut x = DVector::zeros(p);
        for (slot, &(_, i)) in x_cols.iter().enumerate() {
            x[slot] = parse_f64(get(i)?, line, &format!("x{}", slot + 1))?;
        }
        xs.push(x);
        let mut z = DVector::zeros(q);
        for (slot, &(_, i)) in z_cols.iter().enumerate() {
            z[slot] = parse_f64(get(i)?, line, &format!("z{}", slot + 1))?;
        }
        zs.push(z);
    }

    if ys.is_empty() {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    let extras = match spec.likelihood {
        Likelihood::Zip => Extras::Offsets(offsets),
        Likelihood::BinomialProbit => Extras::Trials(trials),
    };
    let data = Dataset { group_of, group_labels, y: ys, x: xs, z: zs, extras };
    data.validate()?;
    Ok(data)
}

/// Writes `data` in the same CSV schema `load_dataset` reads; floats carry 17
/// significant digits so load(write(d)) == d.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (p, q) = (data.p(), data.q());
    let extra_name = match &data.extras {
        Extras::Offsets(_) => "offset",
        Extras::Trials(_) => "trials",
    };
    let mut header = vec!["group".to_string(), "y".to_string(), extra_name.to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    header.extend((1..=q).map(|k| format!("z{k}")));
    w.write_record(&header)?;
    for n in 0..data.n_obs() {
        let mut rec = vec![
            data.group_labels[data.group_of[n]].clone(),
            data.y[n].to_string(),
            match &data.extras {
                Extras::Offsets(o) => format!("{:.16e}", o[n]),
                Extras::Trials(t) => t[n].to_string(),
            },
        ];
        rec.extend(data.x[n].iter().map(|v| format!("{v:.16e}")));
        rec.extend(data.z[n].iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    w.into_inner()
        .map_err(|e| Error::Config(format!("flushing {}: {e}", path.display())))?
        .flush()?;
    Ok(())
}

/// Synthetic-data settings. The covariate scheme is fixed: first entries of x
/// and z are 1 (intercepts), the rest i.i.d. standard normal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub likelihood: Likelihood,
    pub n_groups: usize,
    pub obs_per_group: usize,
    pub p: usize,
    pub q: usize,
    #[serde(with = "crate::jsonio::dvector_rows")]
    pub beta: DVector<f64>,
    /// Zero-inflation logit; required for ZIP, ignored otherwise.
    pub lambda: Option<f64>,
    #[serde(with = "crate::jsonio::dmatrix_rows")]
    pub sigma: DMatrix<f64>,
    /// Constant offset (ZIP only).
    pub offset: f64,
    /// Constant trial count (binomial only).
    pub trials: u64,
    /// May be left out in config files; commands overwrite it with the
    /// run-level seed.
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    /// The simulation-study settings: 10 obs/group, P=8, Q=2, Sigma=0.5*I,
    /// alternating-sign beta (scaled by 0.25 for ZIP), lambda = logit(0.05).
    pub fn study_defaults(likelihood: Likelihood, n_groups: usize, seed: u64) -> Self {
        let p = 8;
        let scale = match likelihood {
            Likelihood::Zip => 0.25,
            Likelihood::BinomialProbit => 1.0,
        };
        let beta = DVector::from_fn(p, |j, _| scale * if j % 2 == 0 { 1.0 } else { -1.0 });
        SimConfig {
            likelihood,
            n_groups,
            obs_per_group: 10,
            p,
            q: 2,
            beta,
            lambda: match likelihood {
                Likelihood::Zip => Some((0.05f64 / 0.95).ln()),
                Likelihood::BinomialProbit => None,
            },
            sigma: DMatrix::identity(2, 2) * 0.5,
            offset: 0.0,
            trials: 1,
            seed,
        }
    }
}

/// Parameters a simulation drew from, for accuracy scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrueParams {
    #[serde(with = "crate::jsonio::dvector_list_rows")]
    pub u: Vec<DVector<f64>>,
    pub lambda: Option<f64>,
    #[serde(with = "crate::jsonio::dvector_rows")]
    pub beta: DVector<f64>,
    #[serde(with = "crate::jsonio::dmatrix_rows")]
    pub sigma: DMatrix<f64>,
}

impl TrueParams {
    /// Stacks the drawn values into the full parameter vector.
    pub fn theta(&self, layout: &ParamLayout) -> DVector<f64> {
        let mut t = DVector::zeros(layout.dim());
        for (l, u) in self.u.iter().enumerate() {
            t.rows_mut(l * layout.q, layout.q).copy_from(u);
        }
        if layout.h == 1 {
            t[layout.hyper_range().start] = self.lambda.expect("lambda drawn for ZIP");
        }
        t.rows_mut(layout.fixed_range().start, layout.p).copy_from(&self.beta);
        t
    }
}

pub fn simulate_dataset(sim: &SimConfig) -> Result<(Dataset, TrueParams)> {
    if sim.n_groups == 0 || sim.obs_per_group == 0 {
        return Err(Error::Config("n_groups and obs_per_group must be positive".into()));
    }
    if sim.q == 0 {
        return Err(Error::Config("Q must be at least 1".into()));
    }
    if sim.beta.len() != sim.p {
        return Err(Error::Config(format!("beta must have length P = {}", sim.p)));
    }
    if sim.sigma.shape() != (sim.q, sim.q) {
        return Err(Error::Config(format!("sigma must be {0}x{0}", sim.q)));
    }
    let chol = Cholesky::new(sim.sigma.clone())
        .ok_or_else(|| Error::Config("sigma_true is not positive definite".into()))?;
    let lambda = match sim.likelihood {
        Likelihood::Zip => {
            Some(sim.lambda.ok_or_else(|| Error::Config("ZIP simulation requires lambda".into()))?)
        }
        Likelihood::BinomialProbit => None,
    };
    if sim.likelihood == Likelihood::BinomialProbit && sim.trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }

    let mut rng = seeded_rng(sim.seed, STREAM_SIMULATE);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let n = sim.n_groups * sim.obs_per_group;
    let mut group_of = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut offsets = Vec::new();
    let mut trials = Vec::new();
    let mut us = Vec::with_capacity(sim.n_groups);

    for l in 0..sim.n_groups {
        let v = DVector::from_fn(sim.q, |_, _| normal(&mut rng));
        let u = chol.l() * v;
        for _ in 0..sim.obs_per_group {
            let x = DVector::from_fn(sim.p, |j, _| if j == 0 { 1.0 } else { normal(&mut rng) });
            let z = DVector::from_fn(sim.q, |k, _| if k == 0 { 1.0 } else { normal(&mut rng) });
            let lin = z.dot(&u) + x.dot(&sim.beta);
            let y = match sim.likelihood {
                Likelihood::Zip => {
                    let p0 = 1.0 / (1.0 + (-lambda.unwrap()).exp());
                    if rng.gen::<f64>() < p0 {
                        0
                    } else {
                        let rate = (lin + sim.offset).exp();
                        if !rate.is_finite() || rate > 1e9 {
                            return Err(Error::Numerical(format!(
                                "simulated Poisson rate {rate:e} is out of range; \
                                 check the true parameter scales"
                            )));
                        }
                        if rate == 0.0 {
                            0
                        } else {
                            let draw: f64 = Poisson::new(rate)
                                .expect("positive finite rate")
                                .sample(&mut rng);
                            draw as u64
                        }
                    }
                }
                Likelihood::BinomialProbit => {
                    let prob = log_phi(lin).exp().min(1.0);
                    Binomial::new(sim.trials, prob)
                        .expect("probability in [0,1]")
                        .sample(&mut rng)
                }
            };
            group_of.push(l);
            ys.push(y);
            xs.push(x);
            zs.push(z);
            match sim.likelihood {
                Likelihood::Zip => offsets.push(sim.offset),
                Likelihood::BinomialProbit => trials.push(sim.trials),
            }
        }
        us.push(u);
    }

    let data = Dataset {
        group_of,
        group_labels: (1..=sim.n_groups).map(|l| l.to_string()).collect(),
        y: ys,
        x: xs,
        z: zs,
        extras: match sim.likelihood {
            Likelihood::Zip => Extras::Offsets(offsets),
            Likelihood::BinomialProbit => Extras::Trials(trials),
        },
    };
    data.validate()?;
    let truth = TrueParams { u: us, lambda, beta: sim.beta.clone(), sigma: sim.sigma.clone() };
    Ok((data, truth))
}
