//! Working models of `Y | X, W`, `S | X, W` and the propensity score, plus
//! fold assignments for sample splitting and cross-fitting.
//!
//! The models only shape the dual variables; the bounds stay valid however
//! badly they fit.

mod design;
mod law;
mod logistic;
mod propensity;
mod ridge;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::OutcomePoint;
use crate::error::{invalid, Result};

pub use law::{conditional_quantile_fn, fit_conditional_law_model, ConditionalLawModel, ModelKind, ModelOptions, ResidualLaw};
pub use logistic::{default_penalty_grid, fit_logistic, fit_logistic_cv, LogisticFit};
pub use propensity::{fit_propensity, PropensityMethod, PropensityModel};
pub use ridge::{default_lambda_grid, fit_ridge, fit_ridge_cv, LinearFit, RidgeCvFit};

/// One observed unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub covariates: Vec<f64>,
    pub treatment: bool,
    /// Observed outcome; ignored (and conventionally 0) when `selection` is false.
    pub outcome: f64,
    pub selection: Option<bool>,
    pub cluster_id: Option<String>,
    pub propensity: Option<f64>,
}

impl ObservationRecord {
    pub fn arm(&self) -> u8 {
        self.treatment as u8
    }

    /// The observed outcome as a dual-grid point. Compound points carry the
    /// selection indicator and use `y = 0` in the unselected stratum.
    pub fn outcome_point(&self, compound: bool) -> Result<OutcomePoint> {
        if !compound {
            return Ok(OutcomePoint::Scalar(self.outcome));
        }
        match self.selection {
            Some(true) => Ok(OutcomePoint::Compound { y: self.outcome, s: true }),
            Some(false) => Ok(OutcomePoint::Compound { y: 0.0, s: false }),
            None => invalid("record has no selection indicator"),
        }
    }
}

/// Check shapes and ranges shared by every consumer of a dataset.
pub fn validate_records(rows: &[ObservationRecord]) -> Result<()> {
    let Some(first) = rows.first() else {
        return invalid("dataset is empty");
    };
    let p = first.covariates.len();
    for (i, r) in rows.iter().enumerate() {
        if r.covariates.len() != p {
            return invalid(format!("row {i} has {} covariates, expected {p}", r.covariates.len()));
        }
        if r.covariates.iter().any(|v| !v.is_finite()) {
            return invalid(format!("row {i} has non-finite covariates"));
        }
        if !r.outcome.is_finite() {
            return invalid(format!("row {i} has a non-finite outcome"));
        }
        if let Some(pi) = r.propensity {
            if !(pi > 0.0 && pi < 1.0) {
                return invalid(format!("row {i} has propensity {pi} outside (0, 1)"));
            }
        }
    }
    Ok(())
}

/// Feature map `phi(x, w)`; the intercept is fitted separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `[x, w, w * x]`.
    #[default]
    Interactions,
    /// `[x, w]`.
    Additive,
}

impl FeatureMap {
    pub fn features(&self, x: &[f64], arm: u8) -> Vec<f64> {
        let w = arm as f64;
        let mut out = Vec::with_capacity(2 * x.len() + 1);
        out.extend_from_slice(x);
        out.push(w);
        if *self == FeatureMap::Interactions {
            out.extend(x.iter().map(|v| w * v));
        }
        out
    }
}

/// A seeded partition of `0..n` into folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n: usize,
    pub n_folds: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    /// Indices in fold `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] == k).collect()
    }

    /// Indices outside fold `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        self.fold_of.iter().for_each(|&k| s[k] += 1);
        s
    }
}

/// Random balanced folds: a seeded permutation dealt round-robin.
pub fn make_folds(n: usize, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return invalid(format!("need at least 2 folds, got {n_folds}"));
    }
    if n_folds > n {
        return invalid(format!("cannot split {n} observations into {n_folds} folds"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % n_folds;
    }
    Ok(FoldAssignment { n, n_folds, fold_of, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_balance_and_determinism() {
        let f = make_folds(4, 2, 1).unwrap();
        assert_eq!(f.sizes(), vec![2, 2]);
        let mut s = make_folds(10, 3, 7).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![3, 3, 4]);
        assert_eq!(make_folds(50, 5, 3).unwrap(), make_folds(50, 5, 3).unwrap());
        assert_ne!(make_folds(50, 5, 3).unwrap(), make_folds(50, 5, 4).unwrap());
        assert!(make_folds(3, 4, 0).is_err());
        assert!(make_folds(3, 1, 0).is_err());
    }

    #[test]
    fn members_and_complement_partition() {
        let f = make_folds(23, 4, 9).unwrap();
        for k in 0..4 {
            let mut all = f.members(k);
            all.extend(f.complement(k));
            all.sort();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
        }
    }

    #[test]
    fn feature_maps() {
        assert_eq!(FeatureMap::Interactions.features(&[2.0, 3.0], 1), vec![2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(FeatureMap::Interactions.features(&[2.0], 0), vec![2.0, 0.0, 0.0]);
        assert_eq!(FeatureMap::Additive.features(&[2.0], 1), vec![2.0, 1.0]);
    }

    #[test]
    fn record_points() {
        let mut r = ObservationRecord {
            covariates: vec![],
            treatment: true,
            outcome: 4.0,
            selection: Some(false),
            cluster_id: None,
            propensity: Some(0.5),
        };
        assert_eq!(r.outcome_point(true).unwrap(), OutcomePoint::Compound { y: 0.0, s: false });
        assert_eq!(r.outcome_point(false).unwrap(), OutcomePoint::Scalar(4.0));
        r.selection = None;
        assert!(r.outcome_point(true).is_err());
    }
}
