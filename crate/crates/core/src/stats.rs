//! Small statistical helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Mean, sample standard deviation and a normal 95% interval for the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    /// Values are accumulated in slice order, so equal inputs give equal bits.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                count: 0,
                mean: f64::NAN,
                stddev: f64::NAN,
                ci_low: f64::NAN,
                ci_high: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let half = Z95 * stddev / (n as f64).sqrt();
        Summary {
            count: n,
            mean,
            stddev,
            ci_low: mean - half,
            ci_high: mean + half,
        }
    }

    pub fn stderr(&self) -> f64 {
        self.stddev / (self.count as f64).sqrt()
    }
}

/// Weighted least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    /// `(XᵀWX)⁻¹`; the coefficient covariance when the weights are inverse variances.
    pub unscaled_cov: Vec<Vec<f64>>,
    /// Weighted residual sum of squares.
    pub rss: f64,
    pub points: usize,
}

impl LinearFit {
    /// Standard error assuming weights are exact inverse variances.
    pub fn known_variance_se(&self, i: usize) -> f64 {
        self.unscaled_cov[i][i].sqrt()
    }

    /// Standard error with the residual variance estimated from the fit.
    pub fn estimated_se(&self, i: usize) -> f64 {
        let dof = self.points.saturating_sub(self.coef.len()).max(1) as f64;
        (self.unscaled_cov[i][i] * self.rss / dof).sqrt()
    }
}

/// Solves `min Σ w_i (y_i - x_i·β)²`. Returns `None` for a rank-deficient design.
pub fn weighted_least_squares(rows: &[Vec<f64>], y: &[f64], w: &[f64]) -> Option<LinearFit> {
    let n = rows.len();
    let p = rows.first()?.len();
    if n < p || y.len() != n || w.len() != n {
        return None;
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let wv = DVector::from_column_slice(w);
    let yv = DVector::from_column_slice(y);
    let xtw = DMatrix::from_fn(p, n, |j, i| x[(i, j)] * wv[i]);
    let gram = &xtw * &x;
    let inv = gram.try_inverse()?;
    let beta = &inv * (&xtw * &yv);
    let resid = &yv - &x * &beta;
    let rss = resid.iter().zip(wv.iter()).map(|(r, w)| w * r * r).sum();
    Some(LinearFit {
        coef: beta.iter().copied().collect(),
        unscaled_cov: (0..p)
            .map(|i| (0..p).map(|j| inv[(i, j)]).collect())
            .collect(),
        rss,
        points: n,
    })
}

pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<LinearFit> {
    weighted_least_squares(rows, y, &vec![1.0; y.len()])
}
