//! Gauss-Hermite quadrature normalized against the standard normal, and
//! tilted-moment integration for one- and two-dimensional kernels.
//!
//! Rules are built by the Golub-Welsch eigendecomposition of the Jacobi
//! matrix of the probabilists' Hermite recurrence, so nodes/weights satisfy
//! `sum_i w_i f(x_i) ~= E[f(X)]` for `X ~ N(0, 1)` directly and the weights
//! sum to one (stored normalized). Tilted integrals evaluate kernels in log
//! space with max-subtraction, so returned unnormalized moments share an
//! arbitrary positive scale: only the ratios `I1/I0`, `I2/I0` are meaningful.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// A quadrature rule against the standard normal: `sum(weights) = 1`.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Builds the `order`-point Gauss-Hermite rule (probabilists' weight,
/// normalized). Exact for polynomials up to degree `2 * order - 1`.
pub fn gauss_hermite(order: usize) -> Result<QuadRule> {
    if order == 0 {
        return Err(Error::Config("quadrature order must be at least 1".into()));
    }
    if order == 1 {
        return Ok(QuadRule {
            nodes: vec![0.0],
            weights: vec![1.0],
        });
    }
    // Jacobi matrix of the monic probabilists' Hermite recurrence:
    // zero diagonal, off-diagonal sqrt(k).
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let first = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(QuadRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    })
}

/// Unnormalized tilted moments `(I0, I1, I2)` of `ker(t) N(t; mean, var)`
/// with nodes placed at `mean + sd * x_i` (adaptive centering). Values are
/// scaled by `exp(-max log kernel)`; ratios give the tilted mean/variance.
/// Returns all zeros when the kernel vanishes at every node.
pub fn tilted_moments_1d<F: Fn(f64) -> f64>(
    logker: F,
    mean: f64,
    var: f64,
    rule: &QuadRule,
) -> Result<(f64, f64, f64)> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Numerical(format!(
            "tilted_moments_1d needs a positive finite variance, got {var}"
        )));
    }
    let sd = var.sqrt();
    let n = rule.order();
    let mut logs = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    let mut max_log = f64::NEG_INFINITY;
    for i in 0..n {
        let t = mean + sd * rule.nodes[i];
        let g = logker(t);
        if g.is_nan() {
            return Err(Error::Numerical(format!(
                "log kernel returned NaN at node {t}"
            )));
        }
        max_log = max_log.max(g);
        logs.push(g);
        points.push(t);
    }
    if max_log == f64::NEG_INFINITY {
        return Ok((0.0, 0.0, 0.0));
    }
    let (mut i0, mut i1, mut i2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let w = rule.weights[i] * (logs[i] - max_log).exp();
        i0 += w;
        i1 += w * points[i];
        i2 += w * points[i] * points[i];
    }
    Ok((i0, i1, i2))
}

/// Two-dimensional analogue on the tensor grid `mean + chol(cov) * (x_i, x_j)`.
/// Returns `(I0, I1, I2)` with `I1` a 2-vector and `I2` a 2x2 second-moment
/// matrix, under the same scaling convention as [`tilted_moments_1d`].
pub fn tilted_moments_2d<F: Fn(f64, f64) -> f64>(
    logker: F,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rule: &QuadRule,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    assert_eq!(mean.len(), 2);
    assert_eq!((cov.nrows(), cov.ncols()), (2, 2));
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("tilted_moments_2d cavity covariance not PD".into()))?;
    let l = chol.l();
    let n = rule.order();
    let mut logs = vec![0.0; n * n];
    let mut t1s = vec![0.0; n * n];
    let mut t2s = vec![0.0; n * n];
    let mut max_log = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            let (xi, xj) = (rule.nodes[i], rule.nodes[j]);
            let t1 = mean[0] + l[(0, 0)] * xi;
            let t2 = mean[1] + l[(1, 0)] * xi + l[(1, 1)] * xj;
            let g = logker(t1, t2);
            if g.is_nan() {
                return Err(Error::Numerical(format!(
                    "log kernel returned NaN at node ({t1}, {t2})"
                )));
            }
            let k = i * n + j;
            logs[k] = g;
            t1s[k] = t1;
            t2s[k] = t2;
            max_log = max_log.max(g);
        }
    }
    if max_log == f64::NEG_INFINITY {
        return Ok((0.0, DVector::zeros(2), DMatrix::zeros(2, 2)));
    }
    let mut i0 = 0.0;
    let mut i1 = DVector::zeros(2);
    let mut i2 = DMatrix::zeros(2, 2);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let w = rule.weights[i] * rule.weights[j] * (logs[k] - max_log).exp();
            let (t1, t2) = (t1s[k], t2s[k]);
            i0 += w;
            i1[0] += w * t1;
            i1[1] += w * t2;
            i2[(0, 0)] += w * t1 * t1;
            i2[(0, 1)] += w * t1 * t2;
            i2[(1, 1)] += w * t2 * t2;
        }
    }
    i2[(1, 0)] = i2[(0, 1)];
    Ok((i0, i1, i2))
}
