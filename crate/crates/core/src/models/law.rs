//! Conditional law models: a ridge mean model plus a residual law, and
//! optionally a logistic selection model.

use serde::{Deserialize, Serialize};

use super::design::matrix_from_rows;
use super::logistic::{default_penalty_grid, fit_logistic_cv, LogisticFit};
use super::ridge::{default_lambda_grid, fit_ridge_cv, LinearFit};
use super::{FeatureMap, ObservationRecord};
use crate::dual::{discretize_law, DiscreteLaw, OutcomePoint};
use crate::error::{invalid, Result};
use crate::stats::{norm_quantile, quantile_sorted, sample_var};

/// Law of the residual around the fitted mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualLaw {
    /// `N(0, sigma^2)` with `sigma` the SD of all training residuals.
    Gaussian,
    /// Empirical law of the training residuals of the same arm.
    #[default]
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    GaussianLinear,
    EmpiricalResidualLinear,
    /// Logistic selection model composed with a linear outcome model fitted
    /// on selected units.
    JointSelectionOutcome,
}

/// Fitting options for [`fit_conditional_law_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub kind: ModelKind,
    /// Residual law of the outcome part of a joint model.
    pub joint_residual: ResidualLaw,
    pub features: FeatureMap,
    pub lambda_grid: Vec<f64>,
    pub penalty_grid: Vec<f64>,
    pub inner_folds: usize,
    pub seed: u64,
}

impl ModelOptions {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            joint_residual: ResidualLaw::Empirical,
            features: FeatureMap::Interactions,
            lambda_grid: default_lambda_grid(),
            penalty_grid: default_penalty_grid(),
            inner_folds: 5,
            seed: 0,
        }
    }
}

/// A fitted working model of `Y | X, W` (and `S | X, W` for joint models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLawModel {
    pub kind: ModelKind,
    pub residual_law: ResidualLaw,
    pub features: FeatureMap,
    pub outcome: LinearFit,
    /// Pooled residual SD (used by the Gaussian residual law).
    pub sigma: f64,
    /// Sorted residual pools for arms 0 and 1.
    pub residuals: [Vec<f64>; 2],
    pub selection: Option<LogisticFit>,
}

/// Fit a conditional law model. Joint models need a selection indicator on
/// every row; the outcome part is fitted on selected rows only.
pub fn fit_conditional_law_model(rows: &[ObservationRecord], opts: &ModelOptions) -> Result<ConditionalLawModel> {
    let joint = opts.kind == ModelKind::JointSelectionOutcome;
    let selection = if joint {
        let mut targets = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            match r.selection {
                Some(s) => targets.push(s),
                None => return invalid(format!("row {i} lacks the selection indicator a joint model needs")),
            }
        }
        let z = matrix_from_rows(&rows.iter().map(|r| opts.features.features(&r.covariates, r.arm())).collect::<Vec<_>>());
        Some(fit_logistic_cv(&z, &targets, None, &opts.penalty_grid, opts.inner_folds, opts.seed ^ 0x5e1e)?)
    } else {
        None
    };
    let fitted: Vec<&ObservationRecord> = rows.iter().filter(|r| !joint || r.selection == Some(true)).collect();
    if fitted.len() < opts.inner_folds.max(2) {
        return invalid(format!("only {} rows available to fit the outcome model", fitted.len()));
    }
    let feats: Vec<Vec<f64>> = fitted.iter().map(|r| opts.features.features(&r.covariates, r.arm())).collect();
    let z = matrix_from_rows(&feats);
    let y: Vec<f64> = fitted.iter().map(|r| r.outcome).collect();
    let outcome = fit_ridge_cv(&z, &y, None, &opts.lambda_grid, opts.inner_folds, opts.seed)?.fit;
    let mut residuals: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut all = Vec::with_capacity(fitted.len());
    for (r, f) in fitted.iter().zip(&feats) {
        let e = r.outcome - outcome.predict(f);
        residuals[r.arm() as usize].push(e);
        all.push(e);
    }
    residuals.iter_mut().for_each(|p| p.sort_by(|a, b| a.total_cmp(b)));
    let sigma = sample_var(&all).sqrt();
    let residual_law = match opts.kind {
        ModelKind::GaussianLinear => ResidualLaw::Gaussian,
        ModelKind::EmpiricalResidualLinear => ResidualLaw::Empirical,
        ModelKind::JointSelectionOutcome => opts.joint_residual,
    };
    match residual_law {
        ResidualLaw::Gaussian if !(sigma > 0.0) => return invalid("residual standard deviation is zero"),
        ResidualLaw::Empirical => {
            if let Some(arm) = residuals.iter().position(|p| p.is_empty()) {
                return invalid(format!("no fitted rows in arm {arm}; its residual pool is empty"));
            }
        }
        _ => {}
    }
    Ok(ConditionalLawModel {
        kind: opts.kind,
        residual_law,
        features: opts.features,
        outcome,
        sigma,
        residuals,
        selection,
    })
}

impl ConditionalLawModel {
    /// Fitted mean `mu(x, arm)` (among selected units for joint models).
    pub fn mean(&self, x: &[f64], arm: u8) -> f64 {
        self.outcome.predict(&self.features.features(x, arm))
    }

    /// `P(S = 1 | x, arm)`; 1 without a selection model.
    pub fn selection_prob(&self, x: &[f64], arm: u8) -> f64 {
        self.selection
            .as_ref()
            .map_or(1.0, |s| s.predict_proba(&self.features.features(x, arm)))
    }

    fn residual_quantile(&self, arm: u8, u: f64) -> f64 {
        match self.residual_law {
            ResidualLaw::Gaussian => self.sigma * norm_quantile(u),
            ResidualLaw::Empirical => quantile_sorted(&self.residuals[arm as usize], u),
        }
    }

    /// Discretised conditional law of the arm's outcome at `x`. Joint models
    /// give the unselected stratum its exact mass.
    pub fn conditional_law(&self, x: &[f64], arm: u8, nvals: usize) -> Result<DiscreteLaw> {
        let mu = self.mean(x, arm);
        if self.selection.is_some() {
            // Keep both strata on the grid so every observed point has a dual value.
            let p = self.selection_prob(x, arm).clamp(1e-6, 1.0 - 1e-6);
            DiscreteLaw::compound(p, &|u| mu + self.residual_quantile(arm, u), nvals)
        } else {
            discretize_law(&|u| Ok(OutcomePoint::Scalar(mu + self.residual_quantile(arm, u))), nvals)
        }
    }
}

/// The conditional quantile function `u -> OutcomePoint` at `x`. Joint
/// models put the first `1 - P(S = 1 | x)` of probability on the
/// unselected point `(0, s = 0)`.
pub fn conditional_quantile_fn<'a>(
    model: &'a ConditionalLawModel,
    x: &'a [f64],
    arm: u8,
) -> impl Fn(f64) -> Result<OutcomePoint> + 'a {
    let mu = model.mean(x, arm);
    let p = model.selection_prob(x, arm);
    move |u: f64| {
        if !(u > 0.0 && u < 1.0) {
            return invalid(format!("quantile level {u} outside (0, 1)"));
        }
        if model.selection.is_none() {
            return Ok(OutcomePoint::Scalar(mu + model.residual_quantile(arm, u)));
        }
        let cut = 1.0 - p;
        if u <= cut {
            Ok(OutcomePoint::Compound { y: 0.0, s: false })
        } else {
            let v = ((u - cut) / p).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            Ok(OutcomePoint::Compound { y: mu + model.residual_quantile(arm, v), s: true })
        }
    }
}
