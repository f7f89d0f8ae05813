//! Accuracy metrics between an approximate posterior and a reference:
//! per-component deviation summaries and an unbiased squared maximum mean
//! discrepancy, plus the labelled sample/summary CSV formats they consume.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Labelled per-component marginal means and SDs.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSummary {
    pub labels: Vec<String>,
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
}

impl MarginalSummary {
    pub fn new(labels: Vec<String>, mean: DVector<f64>, sd: DVector<f64>) -> Result<Self> {
        let s = MarginalSummary { labels, mean, sd };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.mean.len() || self.labels.len() != self.sd.len() {
            return Err(Error::Config(
                "marginal summary labels, means, and SDs must have equal length".into(),
            ));
        }
        if let Some(i) = (0..self.sd.len()).find(|&i| !(self.sd[i] > 0.0)) {
            return Err(Error::Config(format!(
                "marginal SD for {} must be positive, got {}",
                self.labels[i], self.sd[i]
            )));
        }
        Ok(())
    }

    /// Column means and sample SDs of a draw matrix (rows = draws).
    pub fn from_samples(labels: Vec<String>, draws: &DMatrix<f64>) -> Result<Self> {
        let (m, d) = draws.shape();
        if m < 2 {
            return Err(Error::Config("need at least two draws to summarise".into()));
        }
        if labels.len() != d {
            return Err(Error::Config(format!(
                "draw matrix has {d} columns but {} labels",
                labels.len()
            )));
        }
        let mut mean = DVector::zeros(d);
        let mut sd = DVector::zeros(d);
        for j in 0..d {
            let col = draws.column(j);
            let mu = col.sum() / m as f64;
            mean[j] = mu;
            sd[j] = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m as f64 - 1.0)).sqrt();
        }
        MarginalSummary::new(labels, mean, sd)
    }
}

/// Aggregated deviations of an approximation from a reference, per the
/// four-statistic scheme: mean deviations in reference-SD units (arithmetic
/// mean), and SD ratios (geometric mean).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevStats {
    pub dev_mu: f64,
    pub adev_mu: f64,
    pub dev_sigma: f64,
    pub adev_sigma: f64,
    pub n_components: usize,
}

/// Compares marginal summaries over the components whose label starts with
/// `prefix` (empty prefix selects everything). The reference must cover the
/// same filtered label set in the same order.
pub fn dev_stats(
    approx: &MarginalSummary,
    reference: &MarginalSummary,
    prefix: &str,
) -> Result<DevStats> {
    approx.validate()?;
    reference.validate()?;
    let pick = |s: &MarginalSummary| -> Vec<usize> {
        (0..s.labels.len())
            .filter(|&i| s.labels[i].starts_with(prefix))
            .collect()
    };
    let ia = pick(approx);
    let ir = pick(reference);
    if ia.len() != ir.len()
        || ia
            .iter()
            .zip(&ir)
            .any(|(&a, &r)| approx.labels[a] != reference.labels[r])
    {
        return Err(Error::Config(format!(
            "component sets for prefix {prefix:?} do not match between approximation and reference"
        )));
    }
    if ia.is_empty() {
        return Err(Error::Config(format!(
            "no components match prefix {prefix:?}"
        )));
    }
    let n = ia.len() as f64;
    let (mut dev_mu, mut adev_mu) = (0.0, 0.0);
    let (mut log_dev_sigma, mut log_adev_sigma) = (0.0, 0.0);
    for (&a, &r) in ia.iter().zip(&ir) {
        let dev = (approx.mean[a] - reference.mean[r]) / reference.sd[r];
        dev_mu += dev;
        adev_mu += dev.abs();
        let ratio = approx.sd[a] / reference.sd[r];
        log_dev_sigma += ratio.ln();
        log_adev_sigma += ratio.ln().abs();
    }
    Ok(DevStats {
        dev_mu: dev_mu / n,
        adev_mu: adev_mu / n,
        dev_sigma: (log_dev_sigma / n).exp(),
        adev_sigma: (log_adev_sigma / n).exp(),
        n_components: ia.len(),
    })
}

/// Unbiased squared maximum mean discrepancy between two equally sized
/// sample sets under the inner-product kernel, negative values clamped to
/// zero. Rows are draws.
pub fn mmd2_u(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    mmd2_u_with_se(x, y).map(|(v, _)| v)
}

/// [`mmd2_u`] along with the usual U-statistic standard error estimate
/// (from the variance of the per-draw conditional means).
pub fn mmd2_u_with_se(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (m, d) = x.shape();
    if y.shape() != (m, d) {
        return Err(Error::Config(format!(
            "sample sets must have equal shape, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if m < 2 {
        return Err(Error::Config(
            "the unbiased MMD estimate needs at least two draws per set".into(),
        ));
    }
    // h_ij = k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i), symmetric in
    // (i, j); the estimate is its average over ordered pairs i != j and the
    // per-draw means g_i drive the variance estimate.
    let mut g = vec![0.0f64; m];
    for i in 0..m {
        let (xi, yi) = (x.row(i), y.row(i));
        for j in 0..m {
            if i == j {
                continue;
            }
            // Grouped so swapping the two sample sets permutes only the
            // operands of commutative additions, keeping the estimate
            // bitwise symmetric.
            let h = (xi.dot(&x.row(j)) + yi.dot(&y.row(j)))
                - (xi.dot(&y.row(j)) + yi.dot(&x.row(j)));
            g[i] += h;
        }
        g[i] /= (m - 1) as f64;
    }
    let u = g.iter().sum::<f64>() / m as f64;
    let var_g = g.iter().map(|v| (v - u).powi(2)).sum::<f64>() / m as f64;
    let se = (4.0 * var_g / m as f64).sqrt();
    Ok((u.max(0.0), se))
}

/// Writes a draw matrix as CSV: header = labels, one row per draw, floats
/// at full precision.
pub fn write_samples_csv(path: &Path, labels: &[String], draws: &DMatrix<f64>) -> Result<()> {
    if labels.len() != draws.ncols() {
        return Err(Error::Config(format!(
            "draw matrix has {} columns but {} labels",
            draws.ncols(),
            labels.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(labels)?;
    for i in 0..draws.nrows() {
        let rec: Vec<String> = draws.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let labels: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != labels.len() {
            return Err(Error::Config(format!(
                "sample row {} has {} fields, expected {}",
                n + 1,
                rec.len(),
                labels.len()
            )));
        }
        for f in rec.iter() {
            rows.push(
                f.parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad float {f:?}: {e}")))?,
            );
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("sample file contains no draws".into()));
    }
    Ok((labels, DMatrix::from_row_slice(n, rows.len() / n, &rows)))
}

/// Writes a summary as `label,mean,sd` CSV.
pub fn write_summary_csv(path: &Path, summary: &MarginalSummary) -> Result<()> {
    summary.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "mean", "sd"])?;
    for i in 0..summary.labels.len() {
        w.write_record([
            summary.labels[i].as_str(),
            &format!("{:.16e}", summary.mean[i]),
            &format!("{:.16e}", summary.sd[i]),
        ])?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<MarginalSummary> {
    let mut r = csv::Reader::from_path(path)?;
    let mut labels = Vec::new();
    let mut mean = Vec::new();
    let mut sd = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Config(format!(
                "summary row has {} fields, expected label,mean,sd",
                rec.len()
            )));
        }
        labels.push(rec[0].to_string());
        let parse = |f: &str| {
            f.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad float {f:?}: {e}")))
        };
        mean.push(parse(&rec[1])?);
        sd.push(parse(&rec[2])?);
    }
    MarginalSummary::new(labels, DVector::from_vec(mean), DVector::from_vec(sd))
}
