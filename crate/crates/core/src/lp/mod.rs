//! Linear programming for small dense problems.
//!
//! [`solve_lp`] is a general revised simplex. [`solve_ot_dual`] is the
//! transportation (network) simplex for unconstrained optimal transport, and
//! [`min_norm_refine`] moves an optimal point towards the minimum-norm point
//! of the optimal face.

mod min_norm;
mod simplex;
mod transport;

pub use min_norm::{min_norm_refine, DEFAULT_MIN_NORM_ITERS};
pub use simplex::solve_lp;
pub use transport::{
    solve_ot_dual, solve_transport, solve_transport_warm, TransportDual, TransportPlan,
};

use crate::error::{invalid, Result};

/// Absolute tolerance on constraint violation.
pub const PRIMAL_TOL: f64 = 1e-9;
/// Tolerance on reduced costs.
pub const REDUCED_COST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    /// `a . x <= b`
    Le,
    /// `a . x == b`
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarBound {
    Free,
    NonNegative,
}

/// `maximize c . x` subject to dense rows `a_r . x (<= | ==) b_r` and
/// per-variable lower bounds of `-inf` or `0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    objective: Vec<f64>,
    matrix: Vec<f64>,
    rhs: Vec<f64>,
    senses: Vec<RowSense>,
    bounds: Vec<VarBound>,
    in_norm: Vec<bool>,
}

impl LinearProgram {
    /// A program with the given objective, no rows, and all variables free.
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            matrix: Vec::new(),
            rhs: Vec::new(),
            senses: Vec::new(),
            bounds: vec![VarBound::Free; n],
            in_norm: vec![true; n],
        }
    }

    pub fn set_bound(&mut self, var: usize, bound: VarBound) {
        self.bounds[var] = bound;
    }

    /// Exclude a variable from the norm used by [`min_norm_refine`]
    /// (constraint multipliers, typically).
    pub fn exclude_from_norm(&mut self, var: usize) {
        self.in_norm[var] = false;
    }

    /// Append a row. Panics if `coeffs` has the wrong length.
    pub fn add_row(&mut self, coeffs: &[f64], sense: RowSense, rhs: f64) {
        assert_eq!(coeffs.len(), self.n_vars(), "row length mismatch");
        self.matrix.extend_from_slice(coeffs);
        self.rhs.push(rhs);
        self.senses.push(sense);
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_cons(&self) -> usize {
        self.rhs.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.n_vars();
        &self.matrix[r * n..(r + 1) * n]
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn sense(&self, r: usize) -> RowSense {
        self.senses[r]
    }

    pub fn bound(&self, var: usize) -> VarBound {
        self.bounds[var]
    }

    pub fn in_norm(&self, var: usize) -> bool {
        self.in_norm[var]
    }

    /// Objective value `c . x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        dot(&self.objective, x)
    }

    /// Largest constraint violation of `x` (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n_cons() {
            let lhs = dot(self.row(r), x);
            let v = match self.senses[r] {
                RowSense::Le => lhs - self.rhs[r],
                RowSense::Eq => (lhs - self.rhs[r]).abs(),
            };
            worst = worst.max(v);
        }
        for (j, b) in self.bounds.iter().enumerate() {
            if *b == VarBound::NonNegative {
                worst = worst.max(-x[j]);
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vars() == 0 {
            return invalid("linear program has no variables");
        }
        if self.n_cons() == 0 {
            return invalid("linear program has no constraints");
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return invalid("objective has non-finite entries");
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return invalid("constraint matrix has non-finite entries");
        }
        if self.rhs.iter().any(|v| !v.is_finite()) {
            return invalid("right-hand side has non-finite entries");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub variable_values: Vec<f64>,
    pub objective_value: f64,
    pub status: LpStatus,
    /// Constraints forming the optimal basis: row indices, with
    /// `n_cons + j` standing for the bound on variable `j`.
    pub basis: Vec<usize>,
    /// Optimal multipliers of the rows (nonnegative for `<=` rows). Empty
    /// unless `status` is `Optimal`.
    pub row_duals: Vec<f64>,
}

impl LpSolution {
    pub(crate) fn failed(status: LpStatus, n_vars: usize) -> Self {
        Self {
            variable_values: vec![f64::NAN; n_vars],
            objective_value: f64::NAN,
            status,
            basis: Vec::new(),
            row_duals: Vec::new(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
