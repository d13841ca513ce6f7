//! Cross-fitted estimation of dual bounds.
//!
//! For each fold the working models are fitted on the other folds; every
//! unit in the fold then gets a conditional dual solved against the fitted
//! laws at its covariates, extended by c-transform to an evaluation grid
//! containing the fold's observed outcomes (with a final feasibility
//! repair against rounding), and turned into an IPW or AIPW summand. Summands are pooled over folds.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bootstrap::{crossfit_generalized_mb, mb_select_lcb, MbResult, DEFAULT_N_DRAWS};
use crate::dual::{
    c_transform_extend, conditional_mean_of_dual, evaluation_grid, feasibility_adjust, solve_conditional_dual, DiscreteLaw, DualOptions,
    DualProblem, DualSolution, OutcomePoint, Side,
};
use crate::error::{invalid, Error, Result};
use crate::estimands::{EstimandKind, EstimandSpec, GradFn, HFn};
use crate::estimators::{
    aipw_value, delta_method_bound, ipw_value, one_sided_bound, quasilinear_bound, two_sided_interval, BoundEstimate,
    IntervalEstimate, IntervalMethod, SummandTable,
};
use crate::models::{
    fit_conditional_law_model, fit_propensity, make_folds, validate_records, ConditionalLawModel, FeatureMap,
    FoldAssignment, ModelKind, ModelOptions, ObservationRecord, PropensityMethod, ResidualLaw,
};
use crate::stats::{mean, norm_quantile};

/// Which ends of the identified set to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    #[default]
    Both,
    Lower,
    Upper,
}

impl Sides {
    fn list(self) -> Vec<Side> {
        match self {
            Sides::Both => vec![Side::Lower, Side::Upper],
            Sides::Lower => vec![Side::Lower],
            Sides::Upper => vec![Side::Upper],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub n_folds: usize,
    /// Quantile discretisation size of each conditional law.
    pub nvals: usize,
    /// Working model. Compound estimands always use a joint
    /// selection-outcome model with this model's residual law.
    pub model: ModelKind,
    pub features: FeatureMap,
    pub propensity: PropensityMethod,
    /// Propensities are clipped to `[gamma, 1 - gamma]`.
    pub gamma: f64,
    pub seed: u64,
    pub aipw: bool,
    pub min_norm: bool,
    pub interval: IntervalMethod,
    pub sides: Sides,
    /// Extra candidate models for multiplier-bootstrap selection.
    pub mb_models: Vec<ModelKind>,
    pub mb_draws: usize,
    /// Root-search tolerance for quasilinear estimands, relative to the
    /// bracket width.
    pub quasilinear_tol: f64,
    /// Override the automatic bracket of quasilinear estimands.
    pub bracket: Option<(f64, f64)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_folds: 5,
            nvals: 50,
            model: ModelKind::EmpiricalResidualLinear,
            features: FeatureMap::Interactions,
            propensity: PropensityMethod::Known,
            gamma: 0.01,
            seed: 0,
            aipw: true,
            min_norm: false,
            interval: IntervalMethod::Bonferroni,
            sides: Sides::Both,
            mb_models: Vec::new(),
            mb_draws: DEFAULT_N_DRAWS,
            quasilinear_tol: 1e-4,
            bracket: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return invalid(format!("alpha {} outside (0, 0.5]", self.alpha));
        }
        if self.n_folds < 2 {
            return invalid(format!("n_folds must be at least 2, got {}", self.n_folds));
        }
        if self.nvals < 2 {
            return invalid(format!("nvals must be at least 2, got {}", self.nvals));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return invalid(format!("gamma {} outside (0, 0.5)", self.gamma));
        }
        if !(self.quasilinear_tol > 0.0 && self.quasilinear_tol < 1.0) {
            return invalid(format!("quasilinear_tol {} outside (0, 1)", self.quasilinear_tol));
        }
        Ok(())
    }

    fn candidates(&self) -> Vec<ModelKind> {
        let mut out = vec![self.model];
        for m in &self.mb_models {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }
}

/// Derive an independent seed for stream `tag`, index `idx`.
pub fn derive_seed(seed: u64, tag: u64, idx: u64) -> u64 {
    // splitmix64 finaliser over a simple mix of the inputs.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ idx.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_MODEL: u64 = 1;
const STREAM_PROPENSITY: u64 = 2;
const STREAM_BOOTSTRAP: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Ridge penalty chosen for the primary outcome model.
    pub ridge_lambda: f64,
    /// Dual solves summarised by the adjustment statistics.
    pub solves: usize,
    pub mean_adjustment: f64,
    pub max_adjustment: f64,
    /// Units whose constrained dual was infeasible and fell back to the
    /// unconstrained problem.
    pub constraint_fallbacks: usize,
}

/// Multiplier-bootstrap selection over candidate models for one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbSummary {
    pub side: Side,
    pub q_hat: f64,
    pub selected_model: ModelKind,
    pub bound: f64,
    /// `(theta_hat, sigma_hat)` per candidate, in natural units.
    pub per_model: Vec<(ModelKind, f64, f64)>,
    pub n_draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub estimand: String,
    pub kind: String,
    pub n: usize,
    pub lower: Option<BoundEstimate>,
    pub upper: Option<BoundEstimate>,
    pub interval: Option<IntervalEstimate>,
    /// Model-based (non-inferential) bound estimates.
    pub plug_in_lower: Option<f64>,
    pub plug_in_upper: Option<f64>,
    pub mb: Vec<MbSummary>,
    pub folds: Vec<FoldDiagnostics>,
    pub warnings: Vec<String>,
}

/// Per-unit nuisance inputs for one candidate model.
struct UnitLaws {
    laws: [DiscreteLaw; 2],
    grids: [Vec<OutcomePoint>; 2],
}

struct Context<'a> {
    rows: &'a [ObservationRecord],
    spec: &'a EstimandSpec,
    cfg: &'a PipelineConfig,
    folds: FoldAssignment,
    candidates: Vec<ModelKind>,
    /// `units[m][i]`.
    units: Vec<Vec<UnitLaws>>,
    propensity: Vec<f64>,
    points: Vec<OutcomePoint>,
    clusters: Option<Vec<usize>>,
    lambdas: Vec<f64>,
}

struct UnitScore {
    summand: f64,
    objective: f64,
    adjustment: f64,
    fallback: bool,
}

fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn model_options(cfg: &PipelineConfig, kind: ModelKind, compound: bool, seed: u64) -> ModelOptions {
    let mut o = ModelOptions::new(kind);
    o.features = cfg.features;
    o.seed = seed;
    if compound && kind != ModelKind::JointSelectionOutcome {
        o.joint_residual = match kind {
            ModelKind::GaussianLinear => ResidualLaw::Gaussian,
            _ => ResidualLaw::Empirical,
        };
        o.kind = ModelKind::JointSelectionOutcome;
    }
    o
}

/// Check the dataset against the estimand's requirements.
pub fn validate_inputs(rows: &[ObservationRecord], spec: &EstimandSpec, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    validate_records(rows)?;
    if rows.len() < 2 * cfg.n_folds {
        return invalid(format!("{} rows are too few for {} folds", rows.len(), cfg.n_folds));
    }
    if spec.is_compound() {
        if let Some(i) = rows.iter().position(|r| r.selection.is_none()) {
            return invalid(format!("estimand {} needs the selection column; row {i} has none", spec.label));
        }
    }
    if spec.binary_outcome {
        if let Some(i) = rows.iter().position(|r| r.outcome != 0.0 && r.outcome != 1.0) {
            return invalid(format!("estimand {} needs 0/1 outcomes; row {i} has {}", spec.label, rows[i].outcome));
        }
    }
    for arm in [false, true] {
        if !rows.iter().any(|r| r.treatment == arm) {
            return invalid(format!("no units in the {} arm", if arm { "treated" } else { "control" }));
        }
    }
    let with_cluster = rows.iter().filter(|r| r.cluster_id.is_some()).count();
    if with_cluster != 0 && with_cluster != rows.len() {
        return invalid("cluster ids must be given for every row or for none");
    }
    Ok(())
}

fn cluster_indices(rows: &[ObservationRecord]) -> Option<Vec<usize>> {
    rows.first()?.cluster_id.as_ref()?;
    let mut ids: HashMap<&str, usize> = HashMap::new();
    Some(
        rows.iter()
            .map(|r| {
                let next = ids.len();
                *ids.entry(r.cluster_id.as_deref().unwrap_or("")).or_insert(next)
            })
            .collect(),
    )
}

impl<'a> Context<'a> {
    fn build(rows: &'a [ObservationRecord], spec: &'a EstimandSpec, cfg: &'a PipelineConfig) -> Result<Self> {
        validate_inputs(rows, spec, cfg)?;
        let compound = spec.is_compound();
        let n = rows.len();
        let folds = make_folds(n, cfg.n_folds, cfg.seed)?;
        let candidates = cfg.candidates();
        let points = rows.iter().map(|r| r.outcome_point(compound)).collect::<Result<Vec<_>>>()?;
        let mut units: Vec<Vec<Option<UnitLaws>>> = candidates.iter().map(|_| (0..n).map(|_| None).collect()).collect();
        let mut propensity = vec![f64::NAN; n];
        let mut lambdas = Vec::with_capacity(cfg.n_folds);
        for k in 0..cfg.n_folds {
            let train: Vec<ObservationRecord> = folds.complement(k).into_iter().map(|i| rows[i].clone()).collect();
            let members = folds.members(k);
            let ps = fit_propensity(&train, cfg.propensity, cfg.gamma, derive_seed(cfg.seed, STREAM_PROPENSITY, k as u64))?;
            for &i in &members {
                propensity[i] = ps.predict(&rows[i])?;
            }
            let mut extra: [Vec<OutcomePoint>; 2] = [Vec::new(), Vec::new()];
            for &i in &members {
                extra[rows[i].arm() as usize].push(points[i]);
            }
            for (m, kind) in candidates.iter().enumerate() {
                let opts = model_options(cfg, *kind, compound, derive_seed(cfg.seed, STREAM_MODEL, (k * 64 + m) as u64));
                let model = fit_conditional_law_model(&train, &opts)?;
                if m == 0 {
                    lambdas.push(model.outcome.lambda);
                }
                let laws = par_map(members.len(), |j| unit_laws(&model, &rows[members[j]], cfg.nvals, &extra))?;
                for (j, u) in laws.into_iter().enumerate() {
                    units[m][members[j]] = Some(u);
                }
            }
        }
        let units = units
            .into_iter()
            .map(|v| v.into_iter().map(|u| u.expect("every unit belongs to a fold")).collect())
            .collect();
        Ok(Self { rows, spec, cfg, folds, candidates, units, propensity, points, clusters: cluster_indices(rows), lambdas })
    }

    fn score(&self, m: usize, i: usize, problem: &DualProblem, side: Side) -> Result<UnitScore> {
        let u = &self.units[m][i];
        let x = &self.rows[i].covariates;
        let opts = DualOptions { side, min_norm: self.cfg.min_norm, ..DualOptions::default() };
        let unconstrained;
        let (sol, used, fallback): (DualSolution, &DualProblem, bool) =
            match solve_conditional_dual(problem, x, &u.laws[0], &u.laws[1], &opts) {
                Ok(s) => (s, problem, false),
                Err(Error::InconsistentConstraints { .. }) => {
                    unconstrained = DualProblem::new(problem.cost.clone(), Vec::new());
                    (solve_conditional_dual(&unconstrained, x, &u.laws[0], &u.laws[1], &opts)?, &unconstrained, true)
                }
                Err(e) => return Err(e),
            };
        let mut ext = c_transform_extend(&sol, used, x, &u.grids[0], &u.grids[1])?;
        ext.objective_value = conditional_mean_of_dual(&ext, 0, &u.laws[0])? + conditional_mean_of_dual(&ext, 1, &u.laws[1])?;
        let adj = feasibility_adjust(&ext, used, x, &u.grids[0], &u.grids[1])?;
        let treated = self.rows[i].treatment;
        let nu = crate::dual::evaluate_dual(&adj, treated as u8, &self.points[i])?;
        let pi = self.propensity[i];
        let summand = if self.cfg.aipw {
            let c0 = conditional_mean_of_dual(&adj, 0, &u.laws[0])?;
            let c1 = conditional_mean_of_dual(&adj, 1, &u.laws[1])?;
            aipw_value(nu, nu, c1, c0, treated, pi)?
        } else {
            ipw_value(nu, nu, treated, pi)?
        };
        Ok(UnitScore { summand, objective: adj.objective_value, adjustment: adj.adjustment, fallback })
    }

    fn score_all(&self, m: usize, problem: &DualProblem, side: Side) -> Result<Vec<UnitScore>> {
        par_map(self.rows.len(), |i| self.score(m, i, problem, side))
    }

    /// Summands of the identified moments `E[z_1(Y(1))]`, `E[z_0(Y(0))]`.
    fn kappa_columns(&self, m: usize, z1: &dyn Fn(&OutcomePoint) -> f64, z0: &dyn Fn(&OutcomePoint) -> f64) -> Result<[Vec<f64>; 2]> {
        let n = self.rows.len();
        let mut k1 = Vec::with_capacity(n);
        let mut k0 = Vec::with_capacity(n);
        for i in 0..n {
            let y = &self.points[i];
            let laws = &self.units[m][i].laws;
            let (m1, m0) = if self.cfg.aipw { (laws[1].expect(z1), laws[0].expect(z0)) } else { (0.0, 0.0) };
            let pi = self.propensity[i];
            if self.rows[i].treatment {
                k1.push(aipw_value(z1(y), 0.0, m1, 0.0, true, pi)?);
                k0.push(m0);
            } else {
                k1.push(m1);
                k0.push(aipw_value(0.0, z0(y), 0.0, m0, false, pi)?);
            }
        }
        Ok([k1, k0])
    }

    fn model_kappa_means(&self, m: usize, z1: &dyn Fn(&OutcomePoint) -> f64, z0: &dyn Fn(&OutcomePoint) -> f64) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let k1 = self.units[m].iter().map(|u| u.laws[1].expect(z1)).sum::<f64>() / n;
        let k0 = self.units[m].iter().map(|u| u.laws[0].expect(z0)).sum::<f64>() / n;
        (k1, k0)
    }

    fn record_diagnostics(&self, diag: &mut [FoldDiagnostics], scores: &[UnitScore]) {
        for d in diag.iter_mut() {
            let members = self.folds.members(d.fold);
            let total = d.mean_adjustment * d.solves as f64 + members.iter().map(|&i| scores[i].adjustment).sum::<f64>();
            d.solves += members.len();
            d.mean_adjustment = total / d.solves as f64;
            d.max_adjustment = members.iter().fold(d.max_adjustment, |a, &i| a.max(scores[i].adjustment));
            d.constraint_fallbacks += members.iter().filter(|&&i| scores[i].fallback).count();
        }
    }

    /// Outcome range over observations and every discretised law.
    fn outcome_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut see = |p: &OutcomePoint| {
            if p.stratum() != Some(false) {
                lo = lo.min(p.y());
                hi = hi.max(p.y());
            }
        };
        self.points.iter().for_each(&mut see);
        for unit in self.units.iter().flatten() {
            unit.laws.iter().for_each(|l| l.support().iter().for_each(&mut see));
        }
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }
}

fn unit_laws(model: &ConditionalLawModel, row: &ObservationRecord, nvals: usize, extra: &[Vec<OutcomePoint>; 2]) -> Result<UnitLaws> {
    let l0 = model.conditional_law(&row.covariates, 0, nvals)?;
    let l1 = model.conditional_law(&row.covariates, 1, nvals)?;
    let g0 = evaluation_grid(&l0, &extra[0]);
    let g1 = evaluation_grid(&l1, &extra[1]);
    Ok(UnitLaws { laws: [l0, l1], grids: [g0, g1] })
}

/// Bracket for a quasilinear family over differences of outcomes in
/// `[lo, hi]`.
pub fn auto_bracket(lo: f64, hi: f64) -> (f64, f64) {
    let r = (hi - lo).max(0.0);
    let half = 1.05 * r + 1e-3 * (1.0 + r);
    (-half, half)
}

fn negate_mb(r: &MbResult) -> MbResult {
    MbResult { lcb: -r.lcb, per_model: r.per_model.iter().map(|(t, s)| (-t, *s)).collect(), ..r.clone() }
}

fn kind_label(kind: &EstimandKind) -> &'static str {
    match kind {
        EstimandKind::Linear => "linear",
        EstimandKind::Generalized { .. } => "generalized",
        EstimandKind::Quasilinear { .. } => "quasilinear",
    }
}

/// Run the cross-fitted dual-bound estimator.
pub fn estimate_bounds(rows: &[ObservationRecord], spec: &EstimandSpec, cfg: &PipelineConfig) -> Result<BoundReport> {
    let ctx = Context::build(rows, spec, cfg)?;
    let n = rows.len();
    let mut diag: Vec<FoldDiagnostics> = (0..cfg.n_folds)
        .map(|k| FoldDiagnostics {
            fold: k,
            n_train: n - ctx.folds.members(k).len(),
            n_eval: ctx.folds.members(k).len(),
            ridge_lambda: ctx.lambdas[k],
            solves: 0,
            mean_adjustment: 0.0,
            max_adjustment: 0.0,
            constraint_fallbacks: 0,
        })
        .collect();
    let mut report = BoundReport {
        estimand: spec.label.clone(),
        kind: kind_label(&spec.kind).into(),
        n,
        lower: None,
        upper: None,
        interval: None,
        plug_in_lower: None,
        plug_in_upper: None,
        mb: Vec::new(),
        folds: Vec::new(),
        warnings: Vec::new(),
    };
    let clusters = ctx.clusters.as_deref();
    let mb_seed = derive_seed(cfg.seed, STREAM_BOOTSTRAP, 0);
    let use_mb = ctx.candidates.len() > 1;

    for side in cfg.sides.list() {
        let (estimate, plug) = match &spec.kind {
            EstimandKind::Linear => {
                let mut columns = Vec::new();
                let mut plug = 0.0;
                for m in 0..ctx.candidates.len() {
                    let scores = ctx.score_all(m, &spec.problem, side)?;
                    if m == 0 {
                        ctx.record_diagnostics(&mut diag, &scores);
                        plug = mean(&scores.iter().map(|s| s.objective).collect::<Vec<_>>());
                    }
                    columns.push(scores.into_iter().map(|s| s.summand).collect::<Vec<f64>>());
                }
                let est = one_sided_bound(&columns[0], cfg.alpha, side, clusters)?;
                if use_mb {
                    let signed: Vec<Vec<f64>> =
                        columns.iter().map(|c| c.iter().map(|v| side.sign() * v).collect()).collect();
                    let mut table = SummandTable::new(signed, ctx.folds.fold_of.clone())?;
                    table.cluster_of = ctx.clusters.clone();
                    let r = mb_select_lcb(&table, cfg.alpha, cfg.mb_draws, mb_seed)?;
                    let r = if side == Side::Upper { negate_mb(&r) } else { r };
                    report.mb.push(mb_summary(side, &r, &ctx.candidates));
                }
                (est, Some(plug))
            }
            EstimandKind::Generalized { h, grad_h, z1, z0 } => {
                let [k1, k0] = ctx.kappa_columns(0, z1.as_ref(), z0.as_ref())?;
                let mut betas = Vec::new();
                let mut plug = None;
                for m in 0..ctx.candidates.len() {
                    let scores = ctx.score_all(m, &spec.problem, side)?;
                    if m == 0 {
                        ctx.record_diagnostics(&mut diag, &scores);
                        let a = mean(&scores.iter().map(|s| s.objective).collect::<Vec<_>>());
                        let (m1, m0) = ctx.model_kappa_means(0, z1.as_ref(), z0.as_ref());
                        plug = h(&[a, m1, m0]).ok();
                    }
                    betas.push(scores.into_iter().map(|s| s.summand).collect::<Vec<f64>>());
                }
                let est = delta_method_bound(&betas[0], &[&k1, &k0], h.as_ref(), grad_h.as_ref(), cfg.alpha, side, clusters)?;
                if use_mb {
                    let r = generalized_mb(&betas, &k1, &k0, h, grad_h, side, cfg, mb_seed)?;
                    report.mb.push(mb_summary(side, &r, &ctx.candidates));
                }
                (est, plug)
            }
            EstimandKind::Quasilinear { bracket, .. } => {
                if use_mb && side == cfg.sides.list()[0] {
                    report.warnings.push("multiplier-bootstrap selection is not available for quasilinear estimands; using the primary model".into());
                }
                let bracket = cfg.bracket.or(*bracket).unwrap_or_else(|| {
                    let (lo, hi) = ctx.outcome_range();
                    auto_bracket(lo, hi)
                });
                (quasilinear_estimate(&ctx, side, bracket, &mut diag, &mut report.warnings)?, None)
            }
        };
        match side {
            Side::Lower => {
                report.lower = Some(estimate);
                report.plug_in_lower = plug;
            }
            Side::Upper => {
                report.upper = Some(estimate);
                report.plug_in_upper = plug;
            }
        }
    }
    if let (Some(l), Some(u)) = (&report.lower, &report.upper) {
        report.interval = Some(two_sided_interval(l, u, 0.0, cfg.alpha, cfg.interval)?);
        if l.theta_hat > u.theta_hat {
            report.warnings.push(format!(
                "estimated lower bound {} exceeds estimated upper bound {}",
                l.theta_hat, u.theta_hat
            ));
        }
    }
    let fallbacks: usize = diag.iter().map(|d| d.constraint_fallbacks).sum();
    if fallbacks > 0 {
        report.warnings.push(format!(
            "{fallbacks} unit solves had inconsistent constraints under the fitted laws and used the unconstrained dual"
        ));
    }
    for side in [&report.lower, &report.upper].into_iter().flatten() {
        if side.degenerate_variance {
            report.warnings.push(format!("{:?} summands have zero variance", side.side));
        }
    }
    report.folds = diag;
    Ok(report)
}

fn mb_summary(side: Side, r: &MbResult, candidates: &[ModelKind]) -> MbSummary {
    MbSummary {
        side,
        q_hat: r.q_hat,
        selected_model: candidates[r.selected_k],
        bound: r.lcb,
        per_model: r.per_model.iter().zip(candidates).map(|((t, s), k)| (*k, *t, *s)).collect(),
        n_draws: r.n_draws,
        seed: r.seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn generalized_mb(
    betas: &[Vec<f64>],
    k1: &[f64],
    k0: &[f64],
    h: &HFn,
    grad_h: &GradFn,
    side: Side,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MbResult> {
    let kappa = vec![k1.to_vec(), k0.to_vec()];
    let k = betas.len();
    match side {
        Side::Lower => crossfit_generalized_mb(betas, &kappa, &vec![h.clone(); k], &vec![grad_h.clone(); k], cfg.alpha, cfg.mb_draws, seed),
        Side::Upper => {
            // Upper bound of h(beta, ..) is minus the lower bound of -h(-beta', ..).
            let neg: Vec<Vec<f64>> = betas.iter().map(|c| c.iter().map(|v| -v).collect()).collect();
            let (h0, g0) = (h.clone(), grad_h.clone());
            let hn: HFn = std::sync::Arc::new(move |v: &[f64]| {
                let mut w = v.to_vec();
                w[0] = -w[0];
                Ok(-h0(&w)?)
            });
            let gn: GradFn = std::sync::Arc::new(move |v: &[f64]| {
                let mut w = v.to_vec();
                w[0] = -w[0];
                let mut g = g0(&w);
                for gj in g.iter_mut().skip(1) {
                    *gj = -*gj;
                }
                g
            });
            let r = crossfit_generalized_mb(&neg, &kappa, &vec![hn; k], &vec![gn; k], cfg.alpha, cfg.mb_draws, seed)?;
            Ok(negate_mb(&r))
        }
    }
}

fn quasilinear_estimate(
    ctx: &Context<'_>,
    side: Side,
    bracket: (f64, f64),
    diag: &mut [FoldDiagnostics],
    warnings: &mut Vec<String>,
) -> Result<BoundEstimate> {
    let cfg = ctx.cfg;
    let cache: RefCell<BTreeMap<u64, BoundEstimate>> = RefCell::new(BTreeMap::new());
    let mut first_scores = None;
    let mut curve = |c: f64| -> Result<BoundEstimate> {
        if let Some(b) = cache.borrow().get(&c.to_bits()) {
            return Ok(b.clone());
        }
        let problem = ctx.spec.family_member(c)?;
        let scores = ctx.score_all(0, &problem, side)?;
        let summands: Vec<f64> = scores.iter().map(|s| s.summand).collect();
        let est = one_sided_bound(&summands, cfg.alpha, side, ctx.clusters.as_deref())?;
        if first_scores.is_none() {
            first_scores = Some(scores);
        }
        cache.borrow_mut().insert(c.to_bits(), est.clone());
        Ok(est)
    };
    let tol = cfg.quasilinear_tol * (bracket.1 - bracket.0);
    let cb = quasilinear_bound(bracket, tol, side, |c| curve(c).map(|e| e.confidence_bound))?;
    if cb.grid_fallback {
        warnings.push(format!("{side:?} quasilinear search found a non-monotone curve and used the grid scan"));
    }
    let theta = match quasilinear_bound(bracket, tol, side, |c| curve(c).map(|e| e.theta_hat)) {
        Ok(t) => t.value,
        Err(e) => {
            warnings.push(format!("{side:?} point estimate search failed ({e}); reporting the confidence bound"));
            cb.value
        }
    };
    if let Some(scores) = first_scores {
        ctx.record_diagnostics(diag, &scores);
    }
    let z = norm_quantile(1.0 - cfg.alpha);
    let se = (side.sign() * (theta - cb.value) / z).max(0.0);
    Ok(BoundEstimate {
        theta_hat: theta,
        se,
        confidence_bound: cb.value,
        alpha: cfg.alpha,
        side,
        n_effective: ctx.rows.len(),
        degenerate_variance: false,
    })
}

/// Sharp bound on a covariate-free estimand under exact marginal laws.
pub fn population_bound(
    spec: &EstimandSpec,
    law_0: &DiscreteLaw,
    law_1: &DiscreteLaw,
    side: Side,
    options: &DualOptions,
) -> Result<f64> {
    let opts = options.with_side(side);
    let value = |problem: &DualProblem| solve_conditional_dual(problem, &[], law_0, law_1, &opts).map(|s| s.objective_value);
    match &spec.kind {
        EstimandKind::Linear => value(&spec.problem),
        EstimandKind::Generalized { h, z1, z0, .. } => {
            let a = value(&spec.problem)?;
            h(&[a, law_1.expect(|y| z1(y)), law_0.expect(|y| z0(y))])
        }
        EstimandKind::Quasilinear { bracket, .. } => {
            let bracket = bracket.unwrap_or_else(|| {
                let ys = law_0.support().iter().chain(law_1.support()).filter(|p| p.stratum() != Some(false)).map(|p| p.y());
                let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
                auto_bracket(lo.min(hi), hi.max(lo))
            });
            let tol = 1e-10 * (bracket.1 - bracket.0);
            let r = quasilinear_bound(bracket, tol, side, |c| value(&spec.family_member(c)?))?;
            Ok(r.value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimands::{make_fh_cdf, make_lee, make_persuasion, make_var_ite};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_law(ys: &[f64], ps: &[f64]) -> DiscreteLaw {
        DiscreteLaw::new(ys.iter().map(|y| OutcomePoint::Scalar(*y)).collect(), ps.to_vec()).unwrap()
    }

    #[test]
    fn population_fh_and_persuasion() {
        // P(Y1 <= 0) = 0.7, P(Y0 <= 0) = 0.6.
        let l1 = scalar_law(&[0.0, 1.0], &[0.7, 0.3]);
        let l0 = scalar_law(&[0.0, 1.0], &[0.6, 0.4]);
        let spec = make_fh_cdf(0.0, 0.0).unwrap();
        let o = DualOptions::default();
        assert!((population_bound(&spec, &l0, &l1, Side::Lower, &o).unwrap() - 0.3).abs() < 1e-12);
        assert!((population_bound(&spec, &l0, &l1, Side::Upper, &o).unwrap() - 0.6).abs() < 1e-12);

        let l1 = scalar_law(&[0.0, 1.0], &[0.2, 0.8]);
        let l0 = scalar_law(&[0.0, 1.0], &[0.5, 0.5]);
        let p = make_persuasion();
        assert!((population_bound(&p, &l0, &l1, Side::Lower, &o).unwrap() - 0.6).abs() < 1e-12);
        assert!((population_bound(&p, &l0, &l1, Side::Upper, &o).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn population_quasilinear_ite_median() {
        let l = scalar_law(&[0.0, 1.0, 2.0], &[0.3, 0.4, 0.3]);
        let q = crate::estimands::make_ite_quantile(0.5).unwrap();
        let o = DualOptions::default();
        let lo = population_bound(&q, &l, &l, Side::Lower, &o).unwrap();
        let hi = population_bound(&q, &l, &l, Side::Upper, &o).unwrap();
        assert!(lo <= 1e-6 && hi >= -1e-6, "{lo} {hi}");
    }

    fn synthetic(n: usize, seed: u64, selection: bool) -> Vec<ObservationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                let w: bool = rng.random();
                let e: f64 = rng.sample(StandardNormal);
                let s = if selection { Some(rng.random::<f64>() < if w { 0.9 } else { 0.7 }) } else { None };
                let y = if s == Some(false) { 0.0 } else { x[0] + if w { 1.0 } else { 0.0 } + e };
                ObservationRecord { covariates: x, treatment: w, outcome: y, selection: s, cluster_id: None, propensity: Some(0.5) }
            })
            .collect()
    }

    #[test]
    fn crossfit_var_ite_orders_and_is_deterministic() {
        let rows = synthetic(200, 1, false);
        let cfg = PipelineConfig { nvals: 20, ..PipelineConfig::default() };
        let spec = make_var_ite();
        let a = estimate_bounds(&rows, &spec, &cfg).unwrap();
        let b = estimate_bounds(&rows, &spec, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let (l, u) = (a.lower.unwrap(), a.upper.unwrap());
        assert!(l.confidence_bound <= l.theta_hat && l.theta_hat <= u.theta_hat && u.theta_hat <= u.confidence_bound);
        let iv = a.interval.unwrap();
        assert!(iv.lower <= l.theta_hat && iv.upper >= u.theta_hat);
        assert_eq!(a.folds.len(), 5);
    }

    #[test]
    fn lee_requires_selection() {
        let rows = synthetic(100, 2, false);
        let err = estimate_bounds(&rows, &make_lee(true), &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("selection"));
        let rows = synthetic(300, 3, true);
        let cfg = PipelineConfig { nvals: 20, sides: Sides::Lower, ..PipelineConfig::default() };
        let r = estimate_bounds(&rows, &make_lee(true), &cfg).unwrap();
        let l = r.lower.unwrap();
        assert!(l.confidence_bound < l.theta_hat && l.theta_hat < 1.5);
    }

    #[test]
    fn mb_over_two_models() {
        let rows = synthetic(200, 4, false);
        let cfg = PipelineConfig {
            nvals: 15,
            mb_models: vec![ModelKind::GaussianLinear],
            mb_draws: 1000,
            ..PipelineConfig::default()
        };
        let r = estimate_bounds(&rows, &crate::estimands::make_positive_effect(), &cfg).unwrap();
        assert_eq!(r.mb.len(), 2);
        let lo = &r.mb[0];
        let hi = &r.mb[1];
        assert!(lo.bound <= hi.bound);
        assert_eq!(lo.per_model.len(), 2);
    }
}
