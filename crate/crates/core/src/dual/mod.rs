//! Conditional dual problems.
//!
//! For a covariate value `x` with (estimated) laws of `Y(0) | x` and
//! `Y(1) | x`, the lower-bound dual is
//!
//! ```text
//! maximize  E_0[nu_0] + E_1[nu_1]
//! s.t.      nu_0(y0) + nu_1(y1) - sum_l lambda_l w_l(y0, y1) <= f(y0, y1, x),  lambda >= 0.
//! ```
//!
//! Upper bounds run the same program on `-f` and negate. Solutions live on
//! the support grids of the two laws; [`c_transform_extend`] carries them
//! to larger evaluation grids while keeping them feasible, and between grid
//! points they are linearly interpolated with constant extrapolation.

mod law;
mod solve;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use law::{discretize_law, DiscreteLaw, OutcomePoint};
pub use solve::{assemble_conditional_lp, solve_conditional_dual, DualOptions};

use crate::error::{invalid, Result};

/// Cost function `f(y0, y1, x)`.
pub type CostFn = Arc<dyn Fn(&OutcomePoint, &OutcomePoint, &[f64]) -> f64 + Send + Sync>;

/// Which end of the identified set a dual bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    /// `+1` for lower bounds, `-1` for upper bounds.
    pub fn sign(self) -> f64 {
        match self {
            Side::Lower => 1.0,
            Side::Upper => -1.0,
        }
    }
}

/// A restriction `w(y0, y1)` on the joint law, entering the dual with a
/// nonnegative multiplier. The primal requires `E[w(Y(0), Y(1)) | X] <= 0`.
#[derive(Clone)]
pub struct ConstraintFunction {
    pub label: String,
    pub evaluator: Arc<dyn Fn(&OutcomePoint, &OutcomePoint) -> f64 + Send + Sync>,
}

impl ConstraintFunction {
    pub fn new(
        label: impl Into<String>,
        evaluator: impl Fn(&OutcomePoint, &OutcomePoint) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            evaluator: Arc::new(evaluator),
        }
    }

    pub fn eval(&self, y0: &OutcomePoint, y1: &OutcomePoint) -> f64 {
        (self.evaluator)(y0, y1)
    }
}

impl fmt::Debug for ConstraintFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintFunction").field("label", &self.label).finish()
    }
}

/// A cost function together with its constraint set.
#[derive(Clone)]
pub struct DualProblem {
    pub cost: CostFn,
    pub constraints: Vec<ConstraintFunction>,
}

impl DualProblem {
    pub fn new(cost: CostFn, constraints: Vec<ConstraintFunction>) -> Self {
        Self { cost, constraints }
    }

    pub fn unconstrained(
        cost: impl Fn(&OutcomePoint, &OutcomePoint, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(Arc::new(cost), Vec::new())
    }

    pub fn cost(&self, y0: &OutcomePoint, y1: &OutcomePoint, x: &[f64]) -> f64 {
        (self.cost)(y0, y1, x)
    }
}

impl fmt::Debug for DualProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualProblem")
            .field("constraints", &self.constraints)
            .finish_non_exhaustive()
    }
}

/// Dual functions on the discretisation grids.
///
/// Values are in natural units: for `Side::Lower`,
/// `nu_0 + nu_1 - sum lambda w <= f`; for `Side::Upper`,
/// `nu_0 + nu_1 + sum lambda w >= f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub grid_0: Vec<OutcomePoint>,
    pub grid_1: Vec<OutcomePoint>,
    pub values_0: Vec<f64>,
    pub values_1: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// Feasibility adjustment `c_x >= 0` already applied to the values.
    pub adjustment: f64,
    /// Dual objective of the current values against the discretised laws.
    pub objective_value: f64,
    pub side: Side,
}

impl DualSolution {
    fn arm(&self, arm: u8) -> (&[OutcomePoint], &[f64]) {
        if arm == 0 {
            (&self.grid_0, &self.values_0)
        } else {
            (&self.grid_1, &self.values_1)
        }
    }

    /// Signed violation `sigma (nu_0 + nu_1 - f) - sum lambda w` at one pair.
    fn violation(&self, problem: &DualProblem, x: &[f64], y0: &OutcomePoint, n0: f64, y1: &OutcomePoint, n1: f64) -> f64 {
        let sigma = self.side.sign();
        let penalty: f64 = problem
            .constraints
            .iter()
            .zip(&self.multipliers)
            .map(|(c, l)| l * c.eval(y0, y1))
            .sum();
        sigma * (n0 + n1 - problem.cost(y0, y1, x)) - penalty
    }
}

/// Interpolate a dual function stored on a sorted grid.
fn interpolate(grid: &[OutcomePoint], values: &[f64], y: &OutcomePoint) -> Result<f64> {
    let stratum = y.stratum();
    let lo = grid.partition_point(|g| g.stratum() < stratum);
    let hi = grid.partition_point(|g| g.stratum() <= stratum);
    if lo == hi {
        let mut strata: Vec<String> = grid.iter().map(|g| format!("{:?}", g.stratum())).collect();
        strata.dedup();
        return invalid(format!(
            "query stratum {:?} absent from dual grid (strata: {})",
            stratum,
            strata.join(", ")
        ));
    }
    let (g, v) = (&grid[lo..hi], &values[lo..hi]);
    let t = y.y();
    let k = g.partition_point(|p| p.y() < t);
    if k == 0 {
        return Ok(v[0]);
    }
    if k == g.len() {
        return Ok(v[g.len() - 1]);
    }
    let (a, b) = (g[k - 1].y(), g[k].y());
    if b == t {
        return Ok(v[k]);
    }
    let w = (t - a) / (b - a);
    Ok(v[k - 1] + w * (v[k] - v[k - 1]))
}

/// Value of `nu_arm(y)` by linear interpolation within `y`'s stratum.
pub fn evaluate_dual(solution: &DualSolution, arm: u8, y: &OutcomePoint) -> Result<f64> {
    let (grid, values) = solution.arm(arm);
    interpolate(grid, values, y)
}

/// `E[nu_arm(Y)]` under `law`.
pub fn conditional_mean_of_dual(solution: &DualSolution, arm: u8, law: &DiscreteLaw) -> Result<f64> {
    let mut total = 0.0;
    for (p, m) in law.support().iter().zip(law.pmf()) {
        total += m * evaluate_dual(solution, arm, p)?;
    }
    Ok(total)
}

/// Largest signed constraint violation over all pairs of the evaluation
/// grids (may be negative).
pub fn max_violation(
    solution: &DualSolution,
    problem: &DualProblem,
    x: &[f64],
    eval_grid_0: &[OutcomePoint],
    eval_grid_1: &[OutcomePoint],
) -> Result<f64> {
    if eval_grid_0.is_empty() || eval_grid_1.is_empty() {
        return invalid("feasibility evaluation grid is empty");
    }
    let nu0 = eval_grid_0
        .iter()
        .map(|y| evaluate_dual(solution, 0, y))
        .collect::<Result<Vec<_>>>()?;
    let nu1 = eval_grid_1
        .iter()
        .map(|y| evaluate_dual(solution, 1, y))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = f64::NEG_INFINITY;
    for (y0, n0) in eval_grid_0.iter().zip(&nu0) {
        for (y1, n1) in eval_grid_1.iter().zip(&nu1) {
            worst = worst.max(solution.violation(problem, x, y0, *n0, y1, *n1));
        }
    }
    Ok(worst)
}

/// Extend a dual solution to the evaluation grids by a double c-transform:
/// `nu_1` is recomputed on `eval_grid_1` against `nu_0` on its own grid,
/// then `nu_0` on `eval_grid_0` against the new `nu_1`. The result is
/// feasible on `eval_grid_0 x eval_grid_1` up to rounding, and on the
/// original grids it is pointwise no worse than the input (for either side).
/// The objective value is left to the caller, who knows the laws.
pub fn c_transform_extend(
    solution: &DualSolution,
    problem: &DualProblem,
    x: &[f64],
    eval_grid_0: &[OutcomePoint],
    eval_grid_1: &[OutcomePoint],
) -> Result<DualSolution> {
    if eval_grid_0.is_empty() || eval_grid_1.is_empty() {
        return invalid("evaluation grid is empty");
    }
    let sigma = solution.side.sign();
    // Slack of the pair in "lower" orientation: sigma f + sum lambda w.
    let slack = |y0: &OutcomePoint, y1: &OutcomePoint| -> f64 {
        let penalty: f64 = problem
            .constraints
            .iter()
            .zip(&solution.multipliers)
            .map(|(c, l)| l * c.eval(y0, y1))
            .sum();
        sigma * problem.cost(y0, y1, x) + penalty
    };
    // Work with sigma * nu so both sides read "nu_0 + nu_1 <= slack".
    let v1: Vec<f64> = eval_grid_1
        .iter()
        .map(|y1| {
            solution
                .grid_0
                .iter()
                .zip(&solution.values_0)
                .map(|(y0, n0)| slack(y0, y1) - sigma * n0)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let v0: Vec<f64> = eval_grid_0
        .iter()
        .map(|y0| {
            eval_grid_1
                .iter()
                .zip(&v1)
                .map(|(y1, n1)| slack(y0, y1) - n1)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    if v0.iter().chain(&v1).any(|v| !v.is_finite()) {
        return Err(crate::Error::Numerical("c-transform produced non-finite dual values".into()));
    }
    Ok(DualSolution {
        grid_0: eval_grid_0.to_vec(),
        grid_1: eval_grid_1.to_vec(),
        values_0: v0.into_iter().map(|v| sigma * v).collect(),
        values_1: v1.into_iter().map(|v| sigma * v).collect(),
        ..solution.clone()
    })
}

/// Restore feasibility on the evaluation grids by shifting both dual
/// functions by half the largest violation.
pub fn feasibility_adjust(
    solution: &DualSolution,
    problem: &DualProblem,
    x: &[f64],
    eval_grid_0: &[OutcomePoint],
    eval_grid_1: &[OutcomePoint],
) -> Result<DualSolution> {
    let worst = max_violation(solution, problem, x, eval_grid_0, eval_grid_1)?;
    if !worst.is_finite() {
        return Err(crate::Error::Numerical(format!("dual violation is {worst}")));
    }
    let c = (worst / 2.0).max(0.0);
    let mut out = solution.clone();
    if c > 0.0 {
        let shift = solution.side.sign() * c;
        out.values_0.iter_mut().for_each(|v| *v -= shift);
        out.values_1.iter_mut().for_each(|v| *v -= shift);
        out.objective_value -= 2.0 * shift;
        out.adjustment += c;
    }
    Ok(out)
}

/// Union of a law's support and extra points, sorted and deduplicated.
pub fn evaluation_grid(law: &DiscreteLaw, extra: &[OutcomePoint]) -> Vec<OutcomePoint> {
    let mut g: Vec<OutcomePoint> = law.support().iter().chain(extra).copied().collect();
    g.sort_by(|a, b| a.total_cmp(b));
    g.dedup_by(|a, b| a.total_cmp(b).is_eq());
    g
}
