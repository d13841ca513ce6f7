//! Propensity scores: known per-row values or a cross-validated logistic
//! ridge on the covariates, clipped to `[gamma, 1 - gamma]`.

use serde::{Deserialize, Serialize};

use super::design::matrix_from_rows;
use super::logistic::{default_penalty_grid, fit_logistic_cv, LogisticFit};
use super::ObservationRecord;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMethod {
    Known,
    #[serde(alias = "fit")]
    LogisticCv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityModel {
    Known { gamma: f64 },
    Logistic { fit: LogisticFit, gamma: f64 },
}

impl PropensityModel {
    /// Clipped propensity for one record.
    pub fn predict(&self, row: &ObservationRecord) -> Result<f64> {
        let (raw, gamma) = match self {
            PropensityModel::Known { gamma } => match row.propensity {
                Some(p) => (p, *gamma),
                None => return invalid("record has no known propensity"),
            },
            PropensityModel::Logistic { fit, gamma } => (fit.predict_proba(&row.covariates), *gamma),
        };
        Ok(raw.clamp(gamma, 1.0 - gamma))
    }
}

/// Fit (or validate) the propensity model on `rows`.
pub fn fit_propensity(
    rows: &[ObservationRecord],
    method: PropensityMethod,
    gamma: f64,
    seed: u64,
) -> Result<PropensityModel> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return invalid(format!("propensity clip {gamma} must lie in (0, 0.5)"));
    }
    match method {
        PropensityMethod::Known => {
            if let Some(i) = rows.iter().position(|r| r.propensity.is_none()) {
                return invalid(format!("propensity is missing on row {i}"));
            }
            Ok(PropensityModel::Known { gamma })
        }
        PropensityMethod::LogisticCv => {
            let z = matrix_from_rows(&rows.iter().map(|r| r.covariates.clone()).collect::<Vec<_>>());
            let t: Vec<bool> = rows.iter().map(|r| r.treatment).collect();
            let fit = fit_logistic_cv(&z, &t, None, &default_penalty_grid(), 5, seed)?;
            Ok(PropensityModel::Logistic { fit, gamma })
        }
    }
}
