//! Weighted column standardisation shared by the ridge and logistic fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

/// Column means and scales; constant columns get scale 0 and are dropped.
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Indices of non-constant columns.
    pub active: Vec<usize>,
}

impl Standardizer {
    pub fn fit(z: &DMatrix<f64>, w: &[f64]) -> Self {
        let (n, d) = z.shape();
        let total: f64 = w.iter().sum();
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let m = (0..n).map(|i| w[i] * z[(i, j)]).sum::<f64>() / total;
            let v = (0..n).map(|i| w[i] * (z[(i, j)] - m).powi(2)).sum::<f64>() / total;
            mean[j] = m;
            let sd = v.sqrt();
            scale[j] = if sd > 1e-12 * (1.0 + m.abs()) { sd } else { 0.0 };
        }
        let active = (0..d).filter(|&j| scale[j] > 0.0).collect();
        Self { mean, scale, active }
    }

    /// Standardised design restricted to active columns.
    pub fn transform(&self, z: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.active.len(), |r, c| {
            let j = self.active[c];
            (z[(rows[r], j)] - self.mean[j]) / self.scale[j]
        })
    }

    /// Map standardised slopes back to `(intercept_shift, coefficients)`:
    /// `sum b_c (z_j - m_j) / s_j = sum coef_j z_j - shift`.
    pub fn unscale(&self, b: &DVector<f64>, d: usize) -> (f64, Vec<f64>) {
        let mut coef = vec![0.0; d];
        let mut shift = 0.0;
        for (c, &j) in self.active.iter().enumerate() {
            coef[j] = b[c] / self.scale[j];
            shift += coef[j] * self.mean[j];
        }
        (shift, coef)
    }
}

pub(crate) fn check_design(z: &DMatrix<f64>, n_targets: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if z.nrows() != n_targets {
        return invalid(format!("design has {} rows but {n_targets} targets", z.nrows()));
    }
    if z.nrows() == 0 {
        return invalid("design is empty");
    }
    if z.iter().any(|v| !v.is_finite()) {
        return invalid("design matrix has non-finite entries");
    }
    match weights {
        Some(w) if w.len() != n_targets => invalid("weights length does not match the design"),
        Some(w) if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 => {
            invalid("weights must be nonnegative with positive total")
        }
        Some(w) => Ok(w.to_vec()),
        None => Ok(vec![1.0; n_targets]),
    }
}

/// Build a design matrix from feature rows.
pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}
