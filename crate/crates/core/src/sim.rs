//! Synthetic Gaussian designs with selection, their exact sharp bounds and
//! a coverage study comparing three estimators.
//!
//! Design: `X ~ N(0, I_p)`, `Y(k) = X'beta + k tau + sigma_k(X) eps` with
//! `beta = (3 / sqrt(p)) 1` so that `Var(Y(k)) = 10` in the homoskedastic
//! case, `S(k) = 1{U <= sigmoid(X'beta_S + tau_S k)}` with a shared uniform
//! `U` (so `S(1) >= S(0)`), `beta_S = 1 / sqrt(p)`, `tau_S = (0, 1)` and
//! known propensity `1/2`. Heteroskedastic designs use
//! `sigma_k(X) = sigma_k |X|` with `sigma_0^2 + sigma_1^2 = 2 / p`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimands::{make_lee, make_var_ite};
use crate::models::{fit_conditional_law_model, FeatureMap, ModelKind, ModelOptions, ObservationRecord, ResidualLaw};
use crate::pipeline::{derive_seed, estimate_bounds, PipelineConfig, Sides};
use crate::stats::{mean, norm_pdf, norm_quantile, sample_var, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heteroskedasticity {
    Homoskedastic,
    /// `sigma_1 / sigma_0 = 3`.
    #[serde(rename = "hetero_i")]
    HeteroI,
    /// `sigma_0 / sigma_1 = 0.3`.
    #[serde(rename = "hetero_ii")]
    HeteroII,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEstimand {
    /// Lee bounds under monotone selection.
    Lee,
    VarIte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    NoCovariates,
    NaivePlugin,
    CrossfitDual,
}

impl SimMethod {
    pub fn label(self) -> &'static str {
        match self {
            SimMethod::NoCovariates => "no_covariates",
            SimMethod::NaivePlugin => "naive_plugin",
            SimMethod::CrossfitDual => "crossfit_dual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub n: usize,
    pub p: usize,
    pub tau: f64,
    pub heteroskedasticity: Heteroskedasticity,
    pub tau_s0: f64,
    pub tau_s1: f64,
    pub estimand: SimEstimand,
    pub n_reps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub n_folds: usize,
    pub nvals: usize,
    pub n_oracle: usize,
    /// Replications used to estimate the sampling SD of the plug-in methods.
    pub pilot_reps: usize,
    pub methods: Vec<SimMethod>,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            n: 1000,
            p: 20,
            tau: 2.0,
            heteroskedasticity: Heteroskedasticity::Homoskedastic,
            tau_s0: 0.0,
            tau_s1: 1.0,
            estimand: SimEstimand::Lee,
            n_reps: 200,
            seed: 0,
            alpha: 0.05,
            n_folds: 5,
            nvals: 50,
            n_oracle: 100_000,
            pilot_reps: 500,
            methods: vec![SimMethod::NoCovariates, SimMethod::NaivePlugin, SimMethod::CrossfitDual],
        }
    }
}

const STREAM_DATA: u64 = 10;
const STREAM_PILOT: u64 = 11;
const STREAM_FIT: u64 = 12;
const STREAM_ORACLE: u64 = 13;

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return invalid(format!("scenario n = {} is below the minimum of 20", self.n));
        }
        if self.n_reps == 0 {
            return invalid("n_reps must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return invalid(format!("alpha {} outside (0, 0.5)", self.alpha));
        }
        for (name, v) in [("tau", self.tau), ("tau_s0", self.tau_s0), ("tau_s1", self.tau_s1)] {
            if !v.is_finite() {
                return invalid(format!("{name} must be finite"));
            }
        }
        if self.methods.is_empty() {
            return invalid("no methods selected");
        }
        Ok(())
    }

    fn beta(&self) -> f64 {
        if self.p == 0 {
            0.0
        } else {
            3.0 / (self.p as f64).sqrt()
        }
    }

    fn beta_s(&self) -> f64 {
        if self.p == 0 {
            0.0
        } else {
            1.0 / (self.p as f64).sqrt()
        }
    }

    /// Scale factors `(sigma_0, sigma_1)` multiplying `|X|`; `None` when homoskedastic.
    fn hetero_scales(&self) -> Option<(f64, f64)> {
        let total = 2.0 / (self.p.max(1) as f64);
        match self.heteroskedasticity {
            Heteroskedasticity::Homoskedastic => None,
            Heteroskedasticity::HeteroI => {
                let s0 = (total / 10.0).sqrt();
                Some((s0, 3.0 * s0))
            }
            Heteroskedasticity::HeteroII => {
                let s1 = (total / 1.09).sqrt();
                Some((0.3 * s1, s1))
            }
        }
    }

    /// Conditional outcome SDs at `x`.
    pub fn sigmas(&self, x: &[f64]) -> (f64, f64) {
        match self.hetero_scales() {
            None => (1.0, 1.0),
            Some((s0, s1)) => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                (s0 * norm, s1 * norm)
            }
        }
    }

    /// Selection probabilities `(P(S(0) = 1 | x), P(S(1) = 1 | x))`.
    pub fn selection_probs(&self, x: &[f64]) -> (f64, f64) {
        let lin = self.beta_s() * x.iter().sum::<f64>();
        (sigmoid(lin + self.tau_s0), sigmoid(lin + self.tau_s1))
    }
}

/// One replication's dataset; deterministic in `(scenario.seed, rep)`.
pub fn generate_scenario_data(scenario: &SimScenario, rep: u64) -> Vec<ObservationRecord> {
    generate(scenario, derive_seed(scenario.seed, STREAM_DATA, rep))
}

fn generate(sc: &SimScenario, seed: u64) -> Vec<ObservationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = sc.beta();
    let lee = sc.estimand == SimEstimand::Lee;
    (0..sc.n)
        .map(|_| {
            let x: Vec<f64> = (0..sc.p).map(|_| rng.sample(StandardNormal)).collect();
            let w: bool = rng.random();
            let eps: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let (sd0, sd1) = sc.sigmas(&x);
            let arm = w as u8 as f64;
            let y = beta * x.iter().sum::<f64>() + arm * sc.tau + if w { sd1 } else { sd0 } * eps;
            let (p0, p1) = sc.selection_probs(&x);
            let s = lee.then(|| u <= if w { p1 } else { p0 });
            ObservationRecord {
                covariates: x,
                treatment: w,
                outcome: if s == Some(false) { 0.0 } else { y },
                selection: s,
                cluster_id: None,
                propensity: Some(0.5),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBound {
    pub theta_l: f64,
    pub mc_se: f64,
}

/// Conditional Lee lower bound numerator `p0 (tau - sigma_1 phi(Phi^-1(eta)) / eta)`.
fn lee_conditional(tau: f64, p0: f64, p1: f64, sigma1: f64) -> f64 {
    let eta = (p0 / p1).min(1.0);
    let trim = if eta >= 1.0 { 0.0 } else { sigma1 * norm_pdf(norm_quantile(eta)) / eta };
    p0 * (tau - trim)
}

/// Sharp lower bound of the scenario's estimand under the true laws,
/// integrated over `X` by Monte Carlo (exact when `p = 0`).
pub fn oracle_sharp_bound(scenario: &SimScenario, n_oracle: usize) -> Result<OracleBound> {
    if n_oracle < 100_000 {
        return invalid(format!("n_oracle = {n_oracle} is below the minimum of 100000"));
    }
    let draws = if scenario.p == 0 { 1 } else { n_oracle };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, STREAM_ORACLE, 0));
    let mut a = Vec::with_capacity(draws);
    let mut b = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x: Vec<f64> = (0..scenario.p).map(|_| rng.sample(StandardNormal)).collect();
        let (s0, s1) = scenario.sigmas(&x);
        match scenario.estimand {
            SimEstimand::Lee => {
                let (p0, p1) = scenario.selection_probs(&x);
                a.push(lee_conditional(scenario.tau, p0, p1, s1));
                b.push(p0);
            }
            // Comonotone coupling of two Gaussians: E[(Y1 - Y0)^2 | x] = tau^2 + (s1 - s0)^2.
            SimEstimand::VarIte => a.push((s1 - s0).powi(2)),
        }
    }
    let n = draws as f64;
    match scenario.estimand {
        SimEstimand::Lee => {
            let (ma, mb) = (mean(&a), mean(&b));
            let theta = ma / mb;
            let infl: Vec<f64> = a.iter().zip(&b).map(|(ai, bi)| (ai - theta * bi) / mb).collect();
            let se = if draws > 1 { (sample_var(&infl) / n).sqrt() } else { 0.0 };
            Ok(OracleBound { theta_l: theta, mc_se: se })
        }
        SimEstimand::VarIte => {
            let se = if draws > 1 { (sample_var(&a) / n).sqrt() } else { 0.0 };
            Ok(OracleBound { theta_l: mean(&a), mc_se: se })
        }
    }
}

fn fit_options(kind: ModelKind, seed: u64) -> ModelOptions {
    let mut o = ModelOptions::new(kind);
    o.features = FeatureMap::Additive;
    o.joint_residual = ResidualLaw::Gaussian;
    o.seed = seed;
    o
}

/// Plug-in estimate from an (essentially unpenalized) Gaussian working model
/// fitted on all data.
pub fn naive_plugin_estimate(sc: &SimScenario, rows: &[ObservationRecord], seed: u64) -> Result<f64> {
    let ols = |kind| {
        let mut o = fit_options(kind, seed);
        o.lambda_grid = vec![1e-8];
        o
    };
    match sc.estimand {
        SimEstimand::Lee => {
            let model = fit_conditional_law_model(rows, &ols(ModelKind::JointSelectionOutcome))?;
            let (mut num, mut den) = (0.0, 0.0);
            for r in rows {
                let x = &r.covariates;
                let (p0, p1) = (model.selection_prob(x, 0), model.selection_prob(x, 1));
                num += lee_conditional(model.mean(x, 1) - model.mean(x, 0), p0, p1, model.sigma);
                den += p0;
            }
            Ok(num / den)
        }
        SimEstimand::VarIte => {
            let model = fit_conditional_law_model(rows, &ols(ModelKind::GaussianLinear))?;
            let sd = |pool: &Vec<f64>| (pool.iter().map(|e| e * e).sum::<f64>() / pool.len() as f64).sqrt();
            Ok((sd(&model.residuals[1]) - sd(&model.residuals[0])).powi(2))
        }
    }
}

/// Covariate-free estimate: empirical Lee trimming, or the comonotone
/// variance bound of the two empirical marginals.
pub fn no_covariates_estimate(sc: &SimScenario, rows: &[ObservationRecord]) -> Result<f64> {
    let arm_outcomes = |arm: bool| -> Vec<f64> {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.treatment == arm && r.selection != Some(false))
            .map(|r| r.outcome)
            .collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    };
    let (y0, y1) = (arm_outcomes(false), arm_outcomes(true));
    if y0.is_empty() || y1.is_empty() {
        return invalid("an arm has no selected outcomes");
    }
    match sc.estimand {
        SimEstimand::Lee => {
            let rate = |arm: bool| {
                let n = rows.iter().filter(|r| r.treatment == arm).count() as f64;
                rows.iter().filter(|r| r.treatment == arm && r.selection == Some(true)).count() as f64 / n
            };
            let eta = (rate(false) / rate(true)).min(1.0);
            // Mean of the bottom eta share of treated outcomes, splitting the boundary point.
            let m = y1.len() as f64;
            let keep = eta * m;
            let full = keep.floor() as usize;
            let mut total: f64 = y1[..full].iter().sum();
            if full < y1.len() {
                total += (keep - full as f64) * y1[full];
            }
            Ok(total / keep - mean(&y0))
        }
        SimEstimand::VarIte => {
            let q = |v: &[f64], u: f64| crate::stats::quantile_sorted(v, u);
            let grid = 400;
            let sq: f64 = (0..grid)
                .map(|j| {
                    let u = (j as f64 + 0.5) / grid as f64;
                    (q(&y1, u) - q(&y0, u)).powi(2)
                })
                .sum::<f64>()
                / grid as f64;
            Ok(sq - (mean(&y1) - mean(&y0)).powi(2))
        }
    }
}

/// Cross-fitted dual lower bound: `(estimate, lcb)`.
pub fn crossfit_dual_estimate(sc: &SimScenario, rows: &[ObservationRecord], seed: u64) -> Result<(f64, f64)> {
    let spec = match sc.estimand {
        SimEstimand::Lee => make_lee(true),
        SimEstimand::VarIte => make_var_ite(),
    };
    let cfg = PipelineConfig {
        alpha: sc.alpha,
        n_folds: sc.n_folds,
        nvals: sc.nvals,
        features: FeatureMap::Additive,
        sides: Sides::Lower,
        seed,
        ..PipelineConfig::default()
    };
    let report = estimate_bounds(rows, &spec, &cfg)?;
    let lower = report.lower.expect("lower side requested");
    Ok((lower.theta_hat, lower.confidence_bound))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: SimMethod,
    pub n: usize,
    pub heteroskedasticity: Heteroskedasticity,
    pub mean_estimate: f64,
    pub mean_lcb: f64,
    /// Share of replications with `lcb <= theta_L`.
    pub coverage: f64,
    pub mean_runtime_s: f64,
    pub completed_reps: usize,
    pub failed_reps: usize,
    /// Sampling SD used for the plug-in LCB (pilot estimate), if any.
    pub pilot_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: SimScenario,
    pub oracle: OracleBound,
    pub rows: Vec<MethodRow>,
}

fn sd(values: &[f64]) -> f64 {
    sample_var(values).sqrt()
}

/// Sampling SDs of the two plug-in methods from `pilot_reps` fresh datasets.
pub fn pilot_sds(sc: &SimScenario) -> Result<(f64, f64)> {
    if sc.pilot_reps < 2 {
        return invalid("pilot_reps must be at least 2");
    }
    let mut naive = Vec::with_capacity(sc.pilot_reps);
    let mut nocov = Vec::with_capacity(sc.pilot_reps);
    for r in 0..sc.pilot_reps as u64 {
        let rows = generate(sc, derive_seed(sc.seed, STREAM_PILOT, r));
        if sc.methods.contains(&SimMethod::NaivePlugin) {
            naive.push(naive_plugin_estimate(sc, &rows, derive_seed(sc.seed, STREAM_FIT, r))?);
        }
        if sc.methods.contains(&SimMethod::NoCovariates) {
            nocov.push(no_covariates_estimate(sc, &rows)?);
        }
    }
    Ok((sd(&naive), sd(&nocov)))
}

/// Run every method on `n_reps` replications and aggregate coverage.
pub fn run_method_comparison(sc: &SimScenario) -> Result<SimReport> {
    sc.validate()?;
    let oracle = oracle_sharp_bound(sc, sc.n_oracle)?;
    let needs_pilot = sc.methods.iter().any(|m| *m != SimMethod::CrossfitDual);
    let (sd_naive, sd_nocov) = if needs_pilot { pilot_sds(sc)? } else { (f64::NAN, f64::NAN) };
    let z = norm_quantile(1.0 - sc.alpha);
    let mut rows = Vec::new();
    for &method in &sc.methods {
        let run_rep = |rep: u64| {
            let data = generate_scenario_data(sc, rep);
            let fit_seed = derive_seed(sc.seed, STREAM_FIT, 1_000_000 + rep);
            let start = Instant::now();
            let out = match method {
                SimMethod::NoCovariates => no_covariates_estimate(sc, &data).map(|e| (e, e - z * sd_nocov)),
                SimMethod::NaivePlugin => naive_plugin_estimate(sc, &data, fit_seed).map(|e| (e, e - z * sd_naive)),
                SimMethod::CrossfitDual => crossfit_dual_estimate(sc, &data, fit_seed),
            };
            (out, start.elapsed().as_secs_f64())
        };
        #[cfg(feature = "parallel")]
        let outcomes: Vec<_> = {
            use rayon::prelude::*;
            (0..sc.n_reps as u64).into_par_iter().map(run_rep).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let outcomes: Vec<_> = (0..sc.n_reps as u64).map(run_rep).collect();
        let mut est = Vec::new();
        let mut lcb = Vec::new();
        let mut secs = 0.0;
        let mut failed = 0;
        for (rep, (out, t)) in outcomes.into_iter().enumerate() {
            secs += t;
            match out {
                Ok((e, l)) => {
                    est.push(e);
                    lcb.push(l);
                }
                Err(err) => {
                    log::warn!("{} rep {rep} failed: {err}", method.label());
                    failed += 1;
                }
            }
        }
        let done = est.len();
        let covered = lcb.iter().filter(|l| **l <= oracle.theta_l).count();
        rows.push(MethodRow {
            method,
            n: sc.n,
            heteroskedasticity: sc.heteroskedasticity,
            mean_estimate: mean(&est),
            mean_lcb: mean(&lcb),
            coverage: if done == 0 { 0.0 } else { covered as f64 / done as f64 },
            mean_runtime_s: secs / sc.n_reps as f64,
            completed_reps: done,
            failed_reps: failed,
            pilot_sd: match method {
                SimMethod::NaivePlugin => Some(sd_naive),
                SimMethod::NoCovariates => Some(sd_nocov),
                SimMethod::CrossfitDual => None,
            },
        });
    }
    Ok(SimReport { scenario: sc.clone(), oracle, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(n: usize, h: Heteroskedasticity) -> SimScenario {
        SimScenario { n, heteroskedasticity: h, ..SimScenario::default() }
    }

    #[test]
    fn data_is_deterministic_and_monotone() {
        let sc = scenario(500, Heteroskedasticity::HeteroI);
        let a = generate_scenario_data(&sc, 3);
        assert_eq!(a, generate_scenario_data(&sc, 3));
        assert_ne!(a, generate_scenario_data(&sc, 4));
        let rate = |arm| {
            let g: Vec<_> = a.iter().filter(|r| r.treatment == arm).collect();
            g.iter().filter(|r| r.selection == Some(true)).count() as f64 / g.len() as f64
        };
        assert!(rate(true) > rate(false));
        for r in &a {
            if r.selection == Some(false) {
                assert_eq!(r.outcome, 0.0);
            }
        }
    }

    #[test]
    fn hetero_scales_match_ratios() {
        let s1 = scenario(100, Heteroskedasticity::HeteroI).hetero_scales().unwrap();
        assert!((s1.1 / s1.0 - 3.0).abs() < 1e-12);
        let s2 = scenario(100, Heteroskedasticity::HeteroII).hetero_scales().unwrap();
        assert!((s2.0 / s2.1 - 0.3).abs() < 1e-12);
        for (a, b) in [s1, s2] {
            assert!((a * a + b * b - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_without_covariates_is_closed_form() {
        let sc = SimScenario { p: 0, ..SimScenario::default() };
        let o = oracle_sharp_bound(&sc, 100_000).unwrap();
        let (p0, p1) = (0.5, sigmoid(1.0));
        let eta = p0 / p1;
        let expect = 2.0 - norm_pdf(norm_quantile(eta)) / eta;
        assert!((o.theta_l - expect).abs() < 1e-12 && o.mc_se == 0.0);
    }

    #[test]
    fn oracle_is_stable_across_seeds() {
        let a = oracle_sharp_bound(&SimScenario { seed: 1, ..SimScenario::default() }, 100_000).unwrap();
        let b = oracle_sharp_bound(&SimScenario { seed: 2, ..SimScenario::default() }, 100_000).unwrap();
        assert!((a.theta_l - b.theta_l).abs() <= 3.0 * (a.mc_se.hypot(b.mc_se)));
    }

    #[test]
    fn zero_effect_symmetry() {
        let sc = SimScenario { tau: 0.0, estimand: SimEstimand::VarIte, n: 4000, ..SimScenario::default() };
        let rows = generate_scenario_data(&sc, 0);
        let y = |arm| mean(&rows.iter().filter(|r| r.treatment == arm).map(|r| r.outcome).collect::<Vec<_>>());
        // Var(Y) = 10 per arm, two arms of ~2000.
        assert!((y(true) - y(false)).abs() < 3.0 * (20.0f64 / 2000.0).sqrt());
    }

    #[test]
    fn small_comparison_runs() {
        let sc = SimScenario { n: 100, n_reps: 2, pilot_reps: 5, nvals: 10, ..SimScenario::default() };
        let r = run_method_comparison(&sc).unwrap();
        assert_eq!(r.rows.len(), 3);
        for row in &r.rows {
            assert_eq!(row.failed_reps, 0);
            assert!((0.0..=1.0).contains(&row.coverage));
        }
    }
}
