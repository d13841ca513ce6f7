//! Built-in estimands: cost functions, constraint sets and the way the
//! dual bound is turned into a bound on the estimand.
//!
//! * `Linear`: the estimand is `E[f(Y(0), Y(1), X)]`.
//! * `Generalized`: the estimand is `h(E[f], E[z1(Y(1))], E[z0(Y(0))])`
//!   with `h` nondecreasing in its first argument and the two moments
//!   identified.
//! * `Quasilinear`: `{theta <= c}` is `{E[f_c] <= 0}` for a family `f_c`
//!   nonincreasing in `c`, so bounds come from a root search over `c`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dual::{ConstraintFunction, CostFn, DualProblem, OutcomePoint};
use crate::error::{invalid, Error, Result};

/// `h(a, kappa_1, kappa_0)`.
pub type HFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
/// Gradient of `h`.
pub type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Identified moment function `z_k(y)`.
pub type MomentFn = Arc<dyn Fn(&OutcomePoint) -> f64 + Send + Sync>;
/// Quasilinear family `c -> f_c`.
pub type FamilyFn = Arc<dyn Fn(f64) -> CostFn + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeShape {
    Scalar,
    /// Outcome paired with a selection indicator.
    Compound,
}

#[derive(Clone)]
pub enum EstimandKind {
    Linear,
    Generalized { h: HFn, grad_h: GradFn, z1: MomentFn, z0: MomentFn },
    /// `bracket = None` means: derive it from the observed outcome range.
    Quasilinear { family: FamilyFn, bracket: Option<(f64, f64)> },
}

impl fmt::Debug for EstimandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimandKind::Linear => write!(f, "Linear"),
            EstimandKind::Generalized { .. } => write!(f, "Generalized"),
            EstimandKind::Quasilinear { bracket, .. } => write!(f, "Quasilinear({bracket:?})"),
        }
    }
}

/// A partially identified estimand.
#[derive(Clone, Debug)]
pub struct EstimandSpec {
    pub label: String,
    /// Cost and constraints. For quasilinear estimands the cost is the
    /// family member at `c = 0`.
    pub problem: DualProblem,
    pub kind: EstimandKind,
    pub outcome_shape: OutcomeShape,
    /// Outcomes must be 0/1.
    pub binary_outcome: bool,
}

impl EstimandSpec {
    fn new(label: &str, cost: CostFn, kind: EstimandKind, shape: OutcomeShape) -> Self {
        Self {
            label: label.to_string(),
            problem: DualProblem::new(cost, Vec::new()),
            kind,
            outcome_shape: shape,
            binary_outcome: false,
        }
    }

    pub fn is_compound(&self) -> bool {
        self.outcome_shape == OutcomeShape::Compound
    }

    /// The linear problem for member `c` of a quasilinear family, with the
    /// spec's constraints.
    pub fn family_member(&self, c: f64) -> Result<DualProblem> {
        match &self.kind {
            EstimandKind::Quasilinear { family, .. } => {
                Ok(DualProblem::new(family(c), self.problem.constraints.clone()))
            }
            _ => invalid(format!("estimand {} is not quasilinear", self.label)),
        }
    }
}

fn cost(f: impl Fn(&OutcomePoint, &OutcomePoint, &[f64]) -> f64 + Send + Sync + 'static) -> CostFn {
    Arc::new(f)
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        invalid(format!("{name} must be finite, got {v}"))
    }
}

/// Joint CDF `P(Y(0) <= y0_star, Y(1) <= y1_star)`.
pub fn make_fh_cdf(y0_star: f64, y1_star: f64) -> Result<EstimandSpec> {
    check_finite("y0_star", y0_star)?;
    check_finite("y1_star", y1_star)?;
    let f = cost(move |a, b, _| ((a.y() <= y0_star) && (b.y() <= y1_star)) as u8 as f64);
    Ok(EstimandSpec::new("fh_cdf", f, EstimandKind::Linear, OutcomeShape::Scalar))
}

/// `Var(Y(1) - Y(0)) = E[(Y1 - Y0)^2] - (E[Y1] - E[Y0])^2`.
pub fn make_var_ite() -> EstimandSpec {
    let f = cost(|a, b, _| (b.y() - a.y()).powi(2));
    let kind = EstimandKind::Generalized {
        h: Arc::new(|v: &[f64]| Ok(v[0] - (v[1] - v[2]).powi(2))),
        grad_h: Arc::new(|v: &[f64]| {
            let d = v[1] - v[2];
            vec![1.0, -2.0 * d, 2.0 * d]
        }),
        z1: Arc::new(|y: &OutcomePoint| y.y()),
        z0: Arc::new(|y: &OutcomePoint| y.y()),
    };
    EstimandSpec::new("var_ite", f, kind, OutcomeShape::Scalar)
}

/// CDF of the treatment effect, `P(Y(1) - Y(0) < t)`.
pub fn make_makarov_cdf(t: f64) -> Result<EstimandSpec> {
    check_finite("t", t)?;
    let f = cost(move |a, b, _| ((b.y() - a.y()) < t) as u8 as f64);
    Ok(EstimandSpec::new("makarov_cdf", f, EstimandKind::Linear, OutcomeShape::Scalar))
}

fn lee_cost(c: f64) -> CostFn {
    cost(move |a, b, _| (b.y() - a.y() - c) * a.s() * b.s())
}

/// Lee bounds on `E[Y(1) - Y(0) | S(0) = S(1) = 1]`.
///
/// With `monotone`, `S(1) >= S(0)` is imposed through the constraint
/// `w = 1{s0 > s1}` and the estimand is `E[(Y1 - Y0) S0 S1] / E[S0]`.
/// Without it the denominator is unidentified and the bound comes from the
/// quasilinear family `f_c = (y1 - y0 - c) s0 s1`.
pub fn make_lee(monotone: bool) -> EstimandSpec {
    if monotone {
        let kind = EstimandKind::Generalized {
            h: Arc::new(|v: &[f64]| {
                if v[2] <= 1e-12 {
                    return Err(Error::Numerical(format!(
                        "selection rate in the control arm is {}; Lee ratio undefined",
                        v[2]
                    )));
                }
                Ok(v[0] / v[2])
            }),
            grad_h: Arc::new(|v: &[f64]| vec![1.0 / v[2], 0.0, -v[0] / (v[2] * v[2])]),
            z1: Arc::new(|_: &OutcomePoint| 0.0),
            z0: Arc::new(|y: &OutcomePoint| y.s()),
        };
        let mut spec = EstimandSpec::new("lee", lee_cost(0.0), kind, OutcomeShape::Compound);
        spec.problem.constraints.push(ConstraintFunction::new("monotone selection", |a, b| {
            (a.s() > b.s()) as u8 as f64
        }));
        spec
    } else {
        let kind = EstimandKind::Quasilinear { family: Arc::new(lee_cost), bracket: None };
        EstimandSpec::new("lee", lee_cost(0.0), kind, OutcomeShape::Compound)
    }
}

/// `E[max(Y(1) - Y(0), 0)]`.
pub fn make_positive_effect() -> EstimandSpec {
    let f = cost(|a, b, _| (b.y() - a.y()).max(0.0));
    EstimandSpec::new("positive_effect", f, EstimandKind::Linear, OutcomeShape::Scalar)
}

/// Probability of sufficiency `P(Y(1) = 1 | Y(0) = 0)` for binary outcomes.
pub fn make_persuasion() -> EstimandSpec {
    let f = cost(|a, b, _| ((b.y() > 0.5) && (a.y() < 0.5)) as u8 as f64);
    let kind = EstimandKind::Generalized {
        h: Arc::new(|v: &[f64]| {
            let denom = 1.0 - v[2];
            if denom <= 1e-6 {
                return Err(Error::Numerical(format!(
                    "P(Y(0) = 0) is estimated as {denom}; the persuasion ratio is degenerate"
                )));
            }
            Ok(v[0] / denom)
        }),
        grad_h: Arc::new(|v: &[f64]| {
            let d = 1.0 - v[2];
            vec![1.0 / d, 0.0, v[0] / (d * d)]
        }),
        z1: Arc::new(|_: &OutcomePoint| 0.0),
        z0: Arc::new(|y: &OutcomePoint| y.y()),
    };
    let mut spec = EstimandSpec::new("persuasion", f, kind, OutcomeShape::Scalar);
    spec.binary_outcome = true;
    spec
}

/// Subgroup effect `E[Y(1) - Y(0) | Y(0) <= threshold]`.
pub fn make_conditional_effect(threshold: f64) -> Result<EstimandSpec> {
    check_finite("threshold", threshold)?;
    let family: FamilyFn = Arc::new(move |c: f64| {
        cost(move |a, b, _| (b.y() - a.y() - c) * ((a.y() <= threshold) as u8 as f64))
    });
    let f = family(0.0);
    Ok(EstimandSpec::new(
        "conditional_effect",
        f,
        EstimandKind::Quasilinear { family, bracket: None },
        OutcomeShape::Scalar,
    ))
}

/// Lower `alpha_q`-quantile of `Y(1) - Y(0)`, via `f_c = alpha_q - 1{y1 - y0 <= c}`.
pub fn make_ite_quantile(alpha_q: f64) -> Result<EstimandSpec> {
    if !(alpha_q > 0.0 && alpha_q < 1.0) {
        return invalid(format!("quantile level {alpha_q} outside (0, 1)"));
    }
    let family: FamilyFn =
        Arc::new(move |c: f64| cost(move |a, b, _| alpha_q - ((b.y() - a.y() <= c) as u8 as f64)));
    let f = family(0.0);
    Ok(EstimandSpec::new(
        "ite_quantile",
        f,
        EstimandKind::Quasilinear { family, bracket: None },
        OutcomeShape::Scalar,
    ))
}

/// Estimand selection by label, as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandConfig {
    pub label: String,
    #[serde(default)]
    pub y0_star: Option<f64>,
    #[serde(default)]
    pub y1_star: Option<f64>,
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub monotone: Option<bool>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub alpha_q: Option<f64>,
}

impl EstimandConfig {
    pub fn label(label: &str) -> Self {
        Self {
            label: label.to_string(),
            y0_star: None,
            y1_star: None,
            t: None,
            monotone: None,
            threshold: None,
            alpha_q: None,
        }
    }

    pub fn build(&self) -> Result<EstimandSpec> {
        fn need(v: Option<f64>, name: &str, label: &str) -> Result<f64> {
            v.ok_or_else(|| Error::InvalidInput(format!("estimand {label} needs parameter {name}")))
        }
        let l = self.label.as_str();
        match l {
            "fh_cdf" => make_fh_cdf(need(self.y0_star, "y0_star", l)?, need(self.y1_star, "y1_star", l)?),
            "var_ite" => Ok(make_var_ite()),
            "makarov_cdf" => make_makarov_cdf(need(self.t, "t", l)?),
            "lee" => Ok(make_lee(self.monotone.unwrap_or(true))),
            "positive_effect" => Ok(make_positive_effect()),
            "persuasion" => Ok(make_persuasion()),
            "conditional_effect" => make_conditional_effect(need(self.threshold, "threshold", l)?),
            "ite_quantile" => make_ite_quantile(need(self.alpha_q, "alpha_q", l)?),
            other => invalid(format!(
                "unknown estimand '{other}' (expected one of: fh_cdf, var_ite, makarov_cdf, lee, positive_effect, persuasion, conditional_effect, ite_quantile)"
            )),
        }
    }
}

/// Probe a spec's structural promises: `h` nondecreasing in its first
/// argument on a coarse grid, and compound costs inert in the unselected
/// stratum's placeholder outcome.
pub fn validate_spec(spec: &EstimandSpec) -> Result<()> {
    if let EstimandKind::Generalized { h, .. } = &spec.kind {
        for &b in &[-1.0, 0.0, 0.5, 2.0] {
            for &c in &[0.1, 0.3, 0.5, 0.9] {
                let mut prev = f64::NEG_INFINITY;
                for k in -4..=4 {
                    let a = k as f64 * 0.5;
                    let v = h(&[a, b, c])?;
                    if v < prev - 1e-12 {
                        return invalid(format!("h of {} decreases in its first argument at ({a}, {b}, {c})", spec.label));
                    }
                    prev = v;
                }
            }
        }
    }
    if spec.is_compound() {
        let problem = match &spec.kind {
            EstimandKind::Quasilinear { .. } => spec.family_member(0.7)?,
            _ => spec.problem.clone(),
        };
        let off = |y| OutcomePoint::Compound { y, s: false };
        let on = |y| OutcomePoint::Compound { y, s: true };
        for &y in &[-2.0, 0.5, 3.0] {
            let pairs = [
                (problem.cost(&off(0.0), &on(y), &[]), problem.cost(&off(1.7), &on(y), &[])),
                (problem.cost(&on(y), &off(0.0), &[]), problem.cost(&on(y), &off(-1.3), &[])),
            ];
            if pairs.iter().any(|(a, b)| (a - b).abs() > 0.0) {
                return invalid(format!("cost of {} depends on the unselected placeholder outcome", spec.label));
            }
        }
    }
    Ok(())
}
