use super::{DiscreteLaw, DualProblem, DualSolution, Side};
use crate::error::{invalid, Error, Result};
use crate::lp::{
    min_norm_refine, solve_lp, solve_transport, solve_transport_warm, LinearProgram, LpSolution, LpStatus, RowSense,
    VarBound,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptions {
    pub side: Side,
    /// Refine towards the minimum-norm optimal dual.
    pub min_norm: bool,
    pub min_norm_iters: usize,
    pub max_lp_iters: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            side: Side::Lower,
            min_norm: false,
            min_norm_iters: crate::lp::DEFAULT_MIN_NORM_ITERS,
            max_lp_iters: 100_000,
        }
    }
}

impl DualOptions {
    pub fn with_side(self, side: Side) -> Self {
        Self { side, ..self }
    }
}

/// Signed, optionally normalised cost and constraint matrices
/// (row-major, `m0 x m1`).
struct Instance<'a> {
    p0: &'a [f64],
    p1: &'a [f64],
    cost: Vec<f64>,
    w: Vec<Vec<f64>>,
    cost_scale: f64,
    w_scales: Vec<f64>,
    labels: Vec<String>,
}

impl<'a> Instance<'a> {
    fn build(
        problem: &DualProblem,
        x: &[f64],
        law_0: &'a DiscreteLaw,
        law_1: &'a DiscreteLaw,
        side: Side,
        normalize: bool,
    ) -> Result<Self> {
        let sigma = side.sign();
        let (s0, s1) = (law_0.support(), law_1.support());
        let mut cost = Vec::with_capacity(s0.len() * s1.len());
        for a in s0 {
            for b in s1 {
                let f = problem.cost(a, b, x);
                if !f.is_finite() {
                    return invalid(format!("cost is {f} at y0={a:?}, y1={b:?}"));
                }
                cost.push(sigma * f);
            }
        }
        let mut w = Vec::with_capacity(problem.constraints.len());
        for c in &problem.constraints {
            let mut m = Vec::with_capacity(cost.len());
            for a in s0 {
                for b in s1 {
                    let v = c.eval(a, b);
                    if !v.is_finite() {
                        return invalid(format!(
                            "constraint '{}' is {v} at y0={a:?}, y1={b:?}",
                            c.label
                        ));
                    }
                    m.push(v);
                }
            }
            w.push(m);
        }
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let cost_scale = if normalize { nonzero(max_abs(&cost)) } else { 1.0 };
        cost.iter_mut().for_each(|c| *c /= cost_scale);
        let mut w_scales = Vec::with_capacity(w.len());
        for m in w.iter_mut() {
            let s = if normalize { nonzero(max_abs(m)) } else { 1.0 };
            m.iter_mut().for_each(|v| *v /= s);
            w_scales.push(s);
        }
        Ok(Self {
            p0: law_0.pmf(),
            p1: law_1.pmf(),
            cost,
            w,
            cost_scale,
            w_scales,
            labels: problem.constraints.iter().map(|c| c.label.clone()).collect(),
        })
    }

    fn m0(&self) -> usize {
        self.p0.len()
    }

    fn m1(&self) -> usize {
        self.p1.len()
    }

    fn linear_program(&self) -> LinearProgram {
        let (m0, m1, l) = (self.m0(), self.m1(), self.w.len());
        let n = m0 + m1 + l;
        let mut objective = Vec::with_capacity(n);
        objective.extend_from_slice(self.p0);
        objective.extend_from_slice(self.p1);
        objective.resize(n, 0.0);
        let mut lp = LinearProgram::new(objective);
        let mut row = vec![0.0; n];
        for j in 0..m0 {
            for i in 0..m1 {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[j] = 1.0;
                row[m0 + i] = 1.0;
                for (k, w) in self.w.iter().enumerate() {
                    row[m0 + m1 + k] = -w[j * m1 + i];
                }
                lp.add_row(&row, RowSense::Le, self.cost[j * m1 + i]);
            }
        }
        for k in 0..l {
            let var = m0 + m1 + k;
            row.iter_mut().for_each(|v| *v = 0.0);
            row[var] = -1.0;
            lp.add_row(&row, RowSense::Le, 0.0);
            lp.set_bound(var, VarBound::NonNegative);
            lp.exclude_from_norm(var);
        }
        lp
    }

    fn inconsistent(&self) -> Error {
        Error::InconsistentConstraints {
            labels: self.labels.clone(),
        }
    }
}

fn nonzero(s: f64) -> f64 {
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Scaled dual variables `(nu_0, nu_1, lambda)`.
type Raw = (Vec<f64>, Vec<f64>, Vec<f64>);

/// The dual linear program at `x`: variables `(nu_0, nu_1, lambda)`, one
/// `<=` row per support pair and one `-lambda_l <= 0` row per constraint.
/// Upper bounds use `-f`.
pub fn assemble_conditional_lp(
    problem: &DualProblem,
    x: &[f64],
    law_0: &DiscreteLaw,
    law_1: &DiscreteLaw,
    side: Side,
) -> Result<LinearProgram> {
    Ok(Instance::build(problem, x, law_0, law_1, side, false)?.linear_program())
}

fn solve_general(inst: &Instance<'_>, max_iters: usize) -> Result<Raw> {
    let lp = inst.linear_program();
    let sol = solve_lp(&lp, max_iters)?;
    match sol.status {
        LpStatus::Optimal => Ok(split(inst, sol.variable_values)),
        LpStatus::Unbounded => Err(inst.inconsistent()),
        LpStatus::IterationLimit => Err(Error::IterationLimit(format!(
            "conditional dual LP exceeded {max_iters} pivots"
        ))),
        LpStatus::Infeasible => Err(Error::Numerical("conditional dual LP reported infeasible".into())),
    }
}

fn split(inst: &Instance<'_>, mut x: Vec<f64>) -> Raw {
    let (m0, m1) = (inst.m0(), inst.m1());
    let lam = x.split_off(m0 + m1);
    let v = x.split_off(m0);
    (x, v, lam)
}

struct LagrangianPoint {
    value: f64,
    /// Supergradient `sum w pi` at the optimal coupling.
    slope: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    basis: Vec<usize>,
}

/// One transport solve on `cost + lambda w`, warm-started from `basis`.
fn lagrangian_point(inst: &Instance<'_>, lambda: f64, basis: Option<&[usize]>) -> Result<LagrangianPoint> {
    let w = &inst.w[0];
    let shifted: Vec<f64> = inst.cost.iter().zip(w).map(|(c, w)| c + lambda * w).collect();
    let plan = solve_transport_warm(inst.p0, inst.p1, &shifted, basis)?;
    let slope: f64 = plan.coupling.iter().zip(w).map(|(p, w)| p * w).sum();
    Ok(LagrangianPoint {
        value: plan.dual.objective_value,
        slope,
        u: plan.dual.potentials_0,
        v: plan.dual.potentials_1,
        basis: plan.basis,
    })
}

const LAMBDA_START: f64 = 4.0;
const LAMBDA_MAX: f64 = 1e4;
const SLOPE_TOL: f64 = 1e-9;

/// Maximise the concave piecewise-linear `G(lambda) = OT(cost + lambda w)`
/// over `lambda >= 0` by intersecting tangents. Costs are normalised, so
/// the multiplier is usually found below `LAMBDA_START`.
fn solve_single_constraint(inst: &Instance<'_>) -> Result<Raw> {
    let at_zero = lagrangian_point(inst, 0.0, None)?;
    if at_zero.slope <= SLOPE_TOL {
        return Ok((at_zero.u, at_zero.v, vec![0.0]));
    }
    let mut lam_hi = LAMBDA_START;
    let mut hi = lagrangian_point(inst, lam_hi, Some(&at_zero.basis))?;
    while hi.slope > SLOPE_TOL {
        if lam_hi >= LAMBDA_MAX {
            return Err(inst.inconsistent());
        }
        lam_hi = (lam_hi * 10.0).min(LAMBDA_MAX);
        hi = lagrangian_point(inst, lam_hi, Some(&hi.basis))?;
    }
    let (mut lo_lam, mut lo) = (0.0, at_zero);
    for _ in 0..100 {
        if lo.slope <= hi.slope {
            break;
        }
        let lam = ((hi.value - hi.slope * lam_hi) - (lo.value - lo.slope * lo_lam)) / (lo.slope - hi.slope);
        let lam = lam.clamp(lo_lam, lam_hi);
        // The two tangents bound G from above, so reaching their
        // intersection value certifies optimality.
        let tangent = lo.value + lo.slope * (lam - lo_lam);
        let mid = lagrangian_point(inst, lam, Some(&hi.basis))?;
        if tangent - mid.value <= 1e-12 * (1.0 + mid.value.abs()) || mid.slope.abs() <= SLOPE_TOL {
            return Ok((mid.u, mid.v, vec![lam]));
        }
        if mid.slope > 0.0 {
            (lo_lam, lo) = (lam, mid);
        } else {
            (lam_hi, hi) = (lam, mid);
        }
    }
    Err(Error::IterationLimit("Lagrangian search over the constraint multiplier did not converge".into()))
}

/// Solve the conditional dual at `x` for the given laws.
pub fn solve_conditional_dual(
    problem: &DualProblem,
    x: &[f64],
    law_0: &DiscreteLaw,
    law_1: &DiscreteLaw,
    options: &DualOptions,
) -> Result<DualSolution> {
    let inst = Instance::build(problem, x, law_0, law_1, options.side, true)?;
    let fast = match inst.w.len() {
        0 => solve_transport(inst.p0, inst.p1, &inst.cost)
            .map(|p| (p.dual.potentials_0, p.dual.potentials_1, Vec::new())),
        1 => solve_single_constraint(&inst),
        _ => Err(Error::IterationLimit("general path".into())),
    };
    let (mut u, mut v, mut lam) = match fast {
        Ok(raw) => raw,
        Err(Error::IterationLimit(_)) => solve_general(&inst, options.max_lp_iters)?,
        Err(e) => return Err(e),
    };

    // Split the free constant between the arms to minimise the norm.
    let kappa = (u.iter().sum::<f64>() - v.iter().sum::<f64>()) / (u.len() + v.len()) as f64;
    u.iter_mut().for_each(|a| *a -= kappa);
    v.iter_mut().for_each(|b| *b += kappa);

    if options.min_norm {
        let lp = inst.linear_program();
        let x0: Vec<f64> = u.iter().chain(&v).chain(&lam).copied().collect();
        let sol = LpSolution {
            objective_value: lp.evaluate(&x0),
            variable_values: x0,
            status: LpStatus::Optimal,
            basis: Vec::new(),
            row_duals: Vec::new(),
        };
        let refined = min_norm_refine(&lp, &sol, options.min_norm_iters);
        (u, v, lam) = split(&inst, refined.variable_values);
    }

    let sigma = options.side.sign();
    let values_0: Vec<f64> = u.iter().map(|a| sigma * a * inst.cost_scale).collect();
    let values_1: Vec<f64> = v.iter().map(|b| sigma * b * inst.cost_scale).collect();
    lam.iter_mut()
        .zip(&inst.w_scales)
        .for_each(|(l, s)| *l = (*l * inst.cost_scale / s).max(0.0));
    let objective_value = inst.p0.iter().zip(&values_0).map(|(p, a)| p * a).sum::<f64>()
        + inst.p1.iter().zip(&values_1).map(|(p, b)| p * b).sum::<f64>();
    Ok(DualSolution {
        grid_0: law_0.support().to_vec(),
        grid_1: law_1.support().to_vec(),
        values_0,
        values_1,
        multipliers: lam,
        adjustment: 0.0,
        objective_value,
        side: options.side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{ConstraintFunction, OutcomePoint};

    fn scalar_law(ys: &[f64], ps: &[f64]) -> DiscreteLaw {
        DiscreteLaw::new(ys.iter().map(|y| OutcomePoint::Scalar(*y)).collect(), ps.to_vec()).unwrap()
    }

    #[test]
    fn lp_shape_counts() {
        let problem = DualProblem::unconstrained(|a, b, _| a.y() * b.y());
        let law = scalar_law(&[0.0, 1.0], &[0.5, 0.5]);
        let lp = assemble_conditional_lp(&problem, &[], &law, &law, Side::Lower).unwrap();
        assert_eq!((lp.n_vars(), lp.n_cons()), (4, 4));

        let ys: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let law = scalar_law(&ys, &[0.02; 50]);
        let mut problem = problem;
        problem.constraints.push(ConstraintFunction::new("w", |_, _| 1.0));
        let lp = assemble_conditional_lp(&problem, &[], &law, &law, Side::Lower).unwrap();
        assert_eq!((lp.n_vars(), lp.n_cons()), (101, 2501));
    }

    #[test]
    fn lee_monotone_rows_carry_minus_one() {
        let problem = DualProblem::new(
            std::sync::Arc::new(|a: &OutcomePoint, b: &OutcomePoint, _: &[f64]| (b.y() - a.y()) * a.s()),
            vec![ConstraintFunction::new("monotone", |a, b| {
                if a.s() > b.s() {
                    1.0
                } else {
                    0.0
                }
            })],
        );
        let law = DiscreteLaw::compound(0.5, &|u| u, 2).unwrap();
        let lp = assemble_conditional_lp(&problem, &[], &law, &law, Side::Lower).unwrap();
        let lam = lp.n_vars() - 1;
        let m = law.len();
        for (j, a) in law.support().iter().enumerate() {
            for (i, b) in law.support().iter().enumerate() {
                let want = if a.s() > b.s() { -1.0 } else { 0.0 };
                assert_eq!(lp.row(j * m + i)[lam], want);
            }
        }
    }

    #[test]
    fn non_finite_cost_names_the_pair() {
        let problem = DualProblem::unconstrained(|a, _, _| 1.0 / a.y());
        let law = scalar_law(&[0.0, 1.0], &[0.5, 0.5]);
        let err = solve_conditional_dual(&problem, &[], &law, &law, &DualOptions::default()).unwrap_err();
        assert!(err.to_string().contains("y0=Scalar(0.0)"));
    }

    #[test]
    fn separable_cost_gives_mean_difference() {
        let problem = DualProblem::unconstrained(|a, b, _| b.y() - a.y());
        let l0 = scalar_law(&[0.0, 1.0, 4.0], &[0.2, 0.3, 0.5]);
        let l1 = scalar_law(&[-1.0, 2.0], &[0.5, 0.5]);
        for side in [Side::Lower, Side::Upper] {
            let s = solve_conditional_dual(&problem, &[], &l0, &l1, &DualOptions::default().with_side(side)).unwrap();
            assert!((s.objective_value - (0.5 - 2.3)).abs() < 1e-10);
        }
    }

    #[test]
    fn inconsistent_constraint_is_reported_with_label() {
        let problem = DualProblem::new(
            std::sync::Arc::new(|_: &OutcomePoint, _: &OutcomePoint, _: &[f64]| 0.0),
            vec![ConstraintFunction::new("always", |_, _| 1.0)],
        );
        let law = scalar_law(&[0.0, 1.0], &[0.5, 0.5]);
        let err = solve_conditional_dual(&problem, &[], &law, &law, &DualOptions::default()).unwrap_err();
        assert_eq!(err, Error::InconsistentConstraints { labels: vec!["always".into()] });
    }
}
