//! Ridge regression with an unpenalised intercept and inner cross-validation.
//!
//! Minimises `sum w (y - a - z b)^2 / sum w + lambda |b|^2` with the slopes
//! measured on weighted-standardised columns.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::design::{check_design, Standardizer};
use super::make_folds;
use crate::error::{invalid, Error, Result};

/// A fitted linear predictor `intercept + coefficients . z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
}

impl LinearFit {
    pub fn predict(&self, z: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Ridge fit at the cross-validated penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeCvFit {
    pub fit: LinearFit,
    /// `(lambda, mean held-out squared error)` for every grid value tried.
    pub cv_mse: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// 20 log-spaced penalties over `[1e-4, 1e4]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..20).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / 19.0)).collect()
}

/// Normal equations on standardised columns, diagonalised once so every
/// penalty costs one back-substitution.
struct RidgeSystem {
    std: Standardizer,
    ybar: f64,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    qt_r: DVector<f64>,
    d: usize,
}

impl RidgeSystem {
    fn new(z: &DMatrix<f64>, y: &[f64], w: &[f64], rows: &[usize]) -> Self {
        let zr = DMatrix::from_fn(rows.len(), z.ncols(), |r, j| z[(rows[r], j)]);
        let wr: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
        let std = Standardizer::fit(&zr, &wr);
        let all: Vec<usize> = (0..rows.len()).collect();
        let zs = std.transform(&zr, &all);
        let total: f64 = wr.iter().sum();
        let ybar = rows.iter().map(|&i| w[i] * y[i]).sum::<f64>() / total;
        let k = zs.ncols();
        let mut gram = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for r in 0..rows.len() {
            let row = zs.row(r);
            let wi = wr[r] / total;
            let yc = y[rows[r]] - ybar;
            for a in 0..k {
                let va = wi * row[a];
                rhs[a] += va * yc;
                for b in a..k {
                    gram[(a, b)] += va * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(gram);
        let qt_r = eig.eigenvectors.transpose() * rhs;
        Self { std, ybar, eig, qt_r, d: z.ncols() }
    }

    fn singular(&self) -> bool {
        let ev = &self.eig.eigenvalues;
        let max = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        ev.iter().any(|v| *v <= 1e-10 * max.max(1e-300))
    }

    fn solve(&self, lambda: f64) -> LinearFit {
        let scaled = DVector::from_iterator(
            self.qt_r.len(),
            self.qt_r.iter().zip(self.eig.eigenvalues.iter()).map(|(r, e)| r / (e + lambda)),
        );
        let b = &self.eig.eigenvectors * scaled;
        let (shift, coefficients) = self.std.unscale(&b, self.d);
        LinearFit { intercept: self.ybar - shift, coefficients, lambda }
    }
}

/// Closed-form ridge fit at a fixed penalty.
pub fn fit_ridge(z: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>, lambda: f64) -> Result<LinearFit> {
    let w = check_design(z, y.len(), weights)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid(format!("ridge penalty {lambda} must be finite and nonnegative"));
    }
    let rows: Vec<usize> = (0..y.len()).collect();
    let sys = RidgeSystem::new(z, y, &w, &rows);
    if lambda == 0.0 && sys.singular() {
        return Err(Error::Numerical("Gram matrix is singular at lambda = 0".into()));
    }
    Ok(sys.solve(lambda))
}

/// Ridge with the penalty chosen by `n_folds_inner`-fold weighted MSE
/// under the one-standard-error rule: the largest penalty whose held-out
/// MSE is within one standard error of the minimum. `lambda = 0` is skipped
/// with a warning when any training Gram matrix is singular.
pub fn fit_ridge_cv(
    z: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    lambda_grid: &[f64],
    n_folds_inner: usize,
    seed: u64,
) -> Result<RidgeCvFit> {
    let w = check_design(z, y.len(), weights)?;
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return invalid("lambda grid must be nonempty, finite and nonnegative");
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("ridge targets must be finite");
    }
    let folds = make_folds(y.len(), n_folds_inner, seed)?;
    // Per-observation held-out losses, one column per penalty.
    let mut losses = vec![vec![0.0; y.len()]; lambda_grid.len()];
    let mut zero_ok = true;
    for k in 0..folds.n_folds {
        let sys = RidgeSystem::new(z, y, &w, &folds.complement(k));
        zero_ok &= !sys.singular();
        let test = folds.members(k);
        for (col, &lam) in losses.iter_mut().zip(lambda_grid) {
            let fit = sys.solve(lam);
            for &i in &test {
                let pred = fit.intercept + z.row(i).iter().zip(&fit.coefficients).map(|(v, b)| v * b).sum::<f64>();
                col[i] = (y[i] - pred).powi(2);
            }
        }
    }
    let wsum: f64 = w.iter().sum();
    let n_eff = wsum.powi(2) / w.iter().map(|v| v * v).sum::<f64>();
    let mut warnings = Vec::new();
    let mut cv_mse = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for (&lam, col) in lambda_grid.iter().zip(&losses) {
        if lam == 0.0 && !zero_ok {
            let msg = "singular Gram matrix at lambda = 0; skipped".to_string();
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mse = col.iter().zip(&w).map(|(l, wi)| wi * l).sum::<f64>() / wsum;
        cv_mse.push((lam, mse));
        if best.is_none_or(|(_, m, _)| mse < m) {
            let var = col.iter().zip(&w).map(|(l, wi)| wi * (l - mse).powi(2)).sum::<f64>() / wsum;
            best = Some((lam, mse, (var / n_eff).sqrt()));
        }
    }
    let Some((_, min_mse, se)) = best else {
        return Err(Error::Numerical("no usable penalty in the ridge grid".into()));
    };
    let lambda = cv_mse
        .iter()
        .filter(|(_, m)| *m <= min_mse + se)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let fit = fit_ridge(z, y, Some(&w), lambda)?;
    Ok(RidgeCvFit { fit, cv_mse, warnings })
}
