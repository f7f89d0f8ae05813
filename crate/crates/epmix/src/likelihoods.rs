//! Observation-model log kernels evaluated on the reduced parameterization:
//! the zero-inflated Poisson with log link and per-observation offset
//! (kernel over linear predictor and zero-inflation logit), and the
//! binomial-probit (kernel over the linear predictor alone).
//!
//! Everything is computed in log space. `exp` overflow clamps through
//! `-exp(eta)` becoming `-inf`, which downstream quadrature treats as a
//! vanishing kernel value rather than a fault.

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// Below this the erfc route loses relative accuracy; switch to the
/// asymptotic tail expansion (truncation error ~1e-12 at the splice).
const PHI_TAIL_SPLIT: f64 = -16.0;

/// `log Phi(x)` for the standard normal CDF, finite for every finite `x`
/// within f64 range (the far left tail uses the asymptotic expansion
/// `Phi(x) ~ phi(x)/(-x) * (1 - x^-2 + 3 x^-4 - ...)`).
pub fn log_phi(x: f64) -> f64 {
    if x >= PHI_TAIL_SPLIT {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        let inv = 1.0 / (x * x);
        let series = 1.0
            + inv
                * (-1.0
                    + inv * (3.0 + inv * (-15.0 + inv * (105.0 + inv * (-945.0 + inv * 10395.0)))));
        -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() - (-x).ln() + series.ln()
    }
}

/// `log expit(x) = -log(1 + exp(-x))`, stable on both sides.
pub fn log_expit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `log(exp(a) + exp(b))` with max-subtraction; tolerates `-inf` inputs.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Zero-inflated Poisson log kernel: `lin` is the linear predictor
/// `z^T u + x^T beta`, `gamma` the zero-inflation logit, `offset` the fixed
/// per-observation offset. For `y = 0` the structural and Poisson zeros mix;
/// for `y > 0` only the Poisson branch contributes.
pub fn zip_log_f(lin: f64, gamma: f64, y: u64, offset: f64) -> f64 {
    let eta = lin + offset;
    let neg_rate = -eta.exp();
    if y == 0 {
        log_add_exp(log_expit(gamma), log_expit(-gamma) + neg_rate)
    } else {
        log_expit(-gamma) + y as f64 * eta + neg_rate - ln_gamma(y as f64 + 1.0)
    }
}

/// Binomial-probit log kernel with `trials` attempts and success probability
/// `Phi(lin)`. Panics when `y > trials`; dataset loading rejects such rows,
/// so a violation here is a caller bug.
pub fn binom_log_f(lin: f64, y: u64, trials: u64) -> f64 {
    assert!(
        y <= trials,
        "binomial response {y} exceeds trial count {trials}"
    );
    let (yf, tf) = (y as f64, trials as f64);
    let ln_choose = ln_gamma(tf + 1.0) - ln_gamma(yf + 1.0) - ln_gamma(tf - yf + 1.0);
    ln_choose + yf * log_phi(lin) + (tf - yf) * log_phi(-lin)
}

/// One observation's tilted-kernel description: which log kernel to use and
/// the data it closes over. The reduced dimension is `1 + h`.
#[derive(Debug, Clone, Copy)]
pub enum ObsKernel {
    Zip { y: u64, offset: f64 },
    BinomialProbit { y: u64, trials: u64 },
}

impl ObsKernel {
    pub fn reduced_dim(&self) -> usize {
        match self {
            ObsKernel::Zip { .. } => 2,
            ObsKernel::BinomialProbit { .. } => 1,
        }
    }

    /// One-dimensional kernels only (binomial-probit).
    pub fn log_1d(&self, lin: f64) -> f64 {
        match self {
            ObsKernel::BinomialProbit { y, trials } => binom_log_f(lin, *y, *trials),
            ObsKernel::Zip { .. } => unreachable!("zero-inflated kernel is two-dimensional"),
        }
    }

    /// Two-dimensional kernels only (zero-inflated Poisson).
    pub fn log_2d(&self, lin: f64, gamma: f64) -> f64 {
        match self {
            ObsKernel::Zip { y, offset } => zip_log_f(lin, gamma, *y, *offset),
            ObsKernel::BinomialProbit { .. } => {
                unreachable!("binomial-probit kernel is one-dimensional")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{gauss_hermite, tilted_moments_2d};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn log_phi_known_quantiles() {
        assert_relative_eq!(log_phi(0.0), 0.5f64.ln(), epsilon = 1e-14);
        let z95 = 1.6448536269514722;
        assert_relative_eq!(log_phi(z95), 0.95f64.ln(), max_relative = 1e-10);
        assert_relative_eq!(log_phi(-z95), 0.05f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn log_phi_branches_agree_in_overlap() {
        // Both the erfc route and the asymptotic expansion are accurate on
        // [-26, -16]; they must agree there.
        let mut x = -26.0;
        while x <= -16.0 {
            let erfc_route = (0.5 * erfc(-x / SQRT_2)).ln();
            let inv = 1.0 / (x * x);
            let series = 1.0
                + inv
                    * (-1.0
                        + inv
                            * (3.0
                                + inv * (-15.0 + inv * (105.0 + inv * (-945.0 + inv * 10395.0)))));
            let tail_route =
                -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() - (-x).ln() + series.ln();
            assert_relative_eq!(erfc_route, tail_route, max_relative = 1e-10);
            x += 0.25;
        }
    }

    #[test]
    fn log_phi_continuous_at_the_splice() {
        let below = log_phi(PHI_TAIL_SPLIT - 1e-9);
        let above = log_phi(PHI_TAIL_SPLIT + 1e-9);
        assert_relative_eq!(below, above, max_relative = 1e-9);
    }

    #[test]
    fn log_phi_finite_and_monotone_over_wide_range() {
        let mut prev = f64::NEG_INFINITY;
        let n = 10_000;
        for i in 0..=n {
            let x = -300.0 + 340.0 * i as f64 / n as f64;
            let v = log_phi(x);
            assert!(v.is_finite(), "log_phi({x}) not finite");
            assert!(v >= prev, "log_phi not monotone at {x}");
            assert!(v <= 0.0);
            prev = v;
        }
    }

    #[test]
    fn log_expit_identities() {
        assert_relative_eq!(log_expit(0.0), -(2.0f64.ln()), epsilon = 1e-15);
        for x in [-30.0, -3.0, -0.5, 0.7, 4.0, 35.0] {
            let total = log_expit(x).exp() + log_expit(-x).exp();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
        assert!(log_expit(-750.0).is_finite());
        assert_relative_eq!(log_expit(-750.0), -750.0, max_relative = 1e-12);
    }

    #[test]
    fn zip_zero_count_worked_value() {
        // lin = 0, offset = 0, gamma = logit(0.05):
        // f = 0.05 + 0.95 * exp(-1).
        let gamma = (0.05f64 / 0.95).ln();
        let expected = (0.05 + 0.95 * (-1.0f64).exp()).ln();
        assert_relative_eq!(zip_log_f(0.0, gamma, 0, 0.0), expected, epsilon = 1e-13);
    }

    #[test]
    fn zip_positive_count_limit_without_inflation() {
        // gamma -> -inf removes the structural zeros: y = 2, lin = 0 gives
        // log(e^-1 / 2!) = -1 - log 2.
        let v = zip_log_f(0.0, -750.0, 2, 0.0);
        assert_relative_eq!(v, -1.0 - 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zip_offset_shifts_the_rate() {
        // With offset o the Poisson rate is exp(lin + o).
        let (lin, o, gamma) = (0.3, 0.9, -0.4);
        let direct = log_expit(-gamma) + 3.0 * (lin + o) - (lin + o).exp() - ln_gamma(4.0);
        assert_relative_eq!(zip_log_f(lin, gamma, 3, o), direct, epsilon = 1e-13);
    }

    #[test]
    fn zip_overflow_guard_clamps_in_log_space() {
        let v0 = zip_log_f(800.0, 0.0, 0, 0.0);
        assert!(v0.is_finite());
        assert_relative_eq!(v0, log_expit(0.0), epsilon = 1e-12);
        assert_eq!(zip_log_f(800.0, 0.0, 3, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn zip_normalizes_over_counts() {
        let rates = [-2.0, 0.0, 2.0];
        let gammas = [-3.0, 0.0, 2.0];
        let offsets = [0.0, 0.5];
        for &lin in &rates {
            for &g in &gammas {
                for &o in &offsets {
                    let total: f64 = (0..=200).map(|y| zip_log_f(lin, g, y, o).exp()).sum();
                    assert_relative_eq!(total, 1.0, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn binomial_worked_values_and_normalization() {
        assert_relative_eq!(binom_log_f(0.0, 1, 1), 0.5f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(
            binom_log_f(1.6448536269514722, 1, 1),
            0.95f64.ln(),
            max_relative = 1e-10
        );
        for &trials in &[1u64, 5, 20] {
            for &lin in &[-2.0, 0.0, 1.5] {
                let total: f64 = (0..=trials).map(|y| binom_log_f(lin, y, trials).exp()).sum();
                assert_relative_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn binomial_kernel_finite_on_extreme_predictors() {
        for &lin in &[-300.0, -30.0, 30.0, 300.0] {
            assert!(binom_log_f(lin, 1, 3).is_finite());
        }
    }

    #[test]
    #[should_panic(expected = "exceeds trial count")]
    fn binomial_rejects_impossible_response() {
        binom_log_f(0.0, 3, 2);
    }

    /// Tensor trapezoid oracle for independent standard-normal cavities.
    /// The trapezoid rule is spectrally accurate for these fast-decaying
    /// smooth integrands, so 401 points on [-12, 12] are far beyond the
    /// comparison tolerance.
    fn trapezoid_oracle_2d<F: Fn(f64, f64) -> f64>(ker: F) -> (DVector<f64>, DMatrix<f64>) {
        let n = 401;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / (n - 1) as f64;
        let norm = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut i0 = 0.0;
        let mut i1 = DVector::zeros(2);
        let mut i2 = DMatrix::zeros(2, 2);
        for a in 0..n {
            let t1 = lo + h * a as f64;
            let wa = if a == 0 || a == n - 1 { 0.5 } else { 1.0 };
            for b in 0..n {
                let t2 = lo + h * b as f64;
                let wb = if b == 0 || b == n - 1 { 0.5 } else { 1.0 };
                let w = wa * wb * ker(t1, t2).exp() * norm(t1) * norm(t2) * h * h;
                i0 += w;
                i1[0] += w * t1;
                i1[1] += w * t2;
                i2[(0, 0)] += w * t1 * t1;
                i2[(0, 1)] += w * t1 * t2;
                i2[(1, 1)] += w * t2 * t2;
            }
        }
        i2[(1, 0)] = i2[(0, 1)];
        let mean = &i1 / i0;
        let cov = &i2 / i0 - &mean * mean.transpose();
        (mean, cov)
    }

    #[test]
    fn zip_tilted_moments_match_grid_oracle() {
        let rule = gauss_hermite(21).unwrap();
        let mean = DVector::zeros(2);
        let cov = DMatrix::identity(2, 2);
        let moments = |y: u64, rule: &crate::quadrature::QuadRule| {
            let (i0, i1, i2) =
                tilted_moments_2d(|l, g| zip_log_f(l, g, y, 0.0), &mean, &cov, rule).unwrap();
            assert!(i0 > 0.0);
            let m = &i1 / i0;
            let c = &i2 / i0 - &m * m.transpose();
            (m, c)
        };

        let (qmean, qcov) = moments(0, &rule);
        let (omean, ocov) = trapezoid_oracle_2d(|l, g| zip_log_f(l, g, 0, 0.0));
        assert_relative_eq!(qmean, omean, max_relative = 1e-6, epsilon = 1e-7);
        assert_relative_eq!(qcov, ocov, max_relative = 1e-6, epsilon = 1e-7);

        // Positive counts shrink the effective support of exp(y*t - e^t), so
        // a 21-node rule on a unit cavity is good to ~1e-3 there; order 41
        // recovers most of the gap. Both are checked against the grid.
        let (qmean3, _) = moments(3, &rule);
        let (omean3, ocov3) = trapezoid_oracle_2d(|l, g| zip_log_f(l, g, 3, 0.0));
        assert_relative_eq!(qmean3, omean3, max_relative = 2e-3);
        let rule41 = gauss_hermite(41).unwrap();
        let (qmean3_hi, qcov3_hi) = moments(3, &rule41);
        assert_relative_eq!(qmean3_hi, omean3, max_relative = 1e-5);
        assert_relative_eq!(qcov3_hi, ocov3, max_relative = 1e-4, epsilon = 1e-5);
    }
}
