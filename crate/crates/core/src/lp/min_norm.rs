//! Minimum-norm point on the optimal face of a linear program.
//!
//! The optimal face is `{x : A x (<=|==) b, bounds, c.x >= v*}`. Its
//! minimum-norm point is the projection of the origin onto that polyhedron,
//! computed by Hildreth's row-action method (dual coordinate ascent, which
//! is Dykstra's algorithm specialised to halfspaces), then polished by an
//! exact projection onto the rows it found active. Because that point is
//! only approximately feasible, the result is pulled back onto the segment
//! from the input optimum, which keeps exact feasibility and can only lower
//! the norm.

use nalgebra::{DMatrix, DVector};

use super::{dot, LinearProgram, LpSolution, LpStatus, RowSense, VarBound, PRIMAL_TOL};

/// Default number of sweeps over the constraint rows.
pub const DEFAULT_MIN_NORM_ITERS: usize = 500;

// Weight of coordinates excluded from the norm. Nonzero keeps the
// projection well defined; small enough that they move freely.
const EXCLUDED_WEIGHT: f64 = 1e-4;

struct Row<'a> {
    coeffs: RowCoeffs<'a>,
    rhs: f64,
    equality: bool,
    scaled_norm: f64,
}

enum RowCoeffs<'a> {
    Dense(&'a [f64]),
    NegObjective(&'a [f64]),
    NegUnit(usize),
}

impl Row<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        match self.coeffs {
            RowCoeffs::Dense(a) => dot(a, x),
            RowCoeffs::NegObjective(c) => -dot(c, x),
            RowCoeffs::NegUnit(j) => -x[j],
        }
    }

    fn step(&self, x: &mut [f64], inv_w: &[f64], delta: f64) {
        match self.coeffs {
            RowCoeffs::Dense(a) => {
                for ((xi, ai), wi) in x.iter_mut().zip(a).zip(inv_w) {
                    *xi -= delta * ai * wi;
                }
            }
            RowCoeffs::NegObjective(c) => {
                for ((xi, ci), wi) in x.iter_mut().zip(c).zip(inv_w) {
                    *xi += delta * ci * wi;
                }
            }
            RowCoeffs::NegUnit(j) => x[j] += delta * inv_w[j],
        }
    }
}

/// Exact weighted projection of `start` onto the rows with positive
/// multipliers, held at equality.
fn polish(rows: &[Row<'_>], mu: &[f64], start: &[f64], inv_w: &[f64], n: usize) -> Option<Vec<f64>> {
    let active: Vec<&Row<'_>> = rows
        .iter()
        .zip(mu)
        .filter(|(_, m)| m.abs() > 0.0)
        .map(|(r, _)| r)
        .collect();
    if active.is_empty() {
        return None;
    }
    let k = active.len();
    let mut a = DMatrix::zeros(k, n);
    for (r, row) in active.iter().enumerate() {
        match row.coeffs {
            RowCoeffs::Dense(c) => c.iter().enumerate().for_each(|(j, v)| a[(r, j)] = *v),
            RowCoeffs::NegObjective(c) => c.iter().enumerate().for_each(|(j, v)| a[(r, j)] = -*v),
            RowCoeffs::NegUnit(j) => a[(r, j)] = -1.0,
        }
    }
    let s = DVector::from_column_slice(start);
    let b = DVector::from_iterator(k, active.iter().map(|r| r.rhs));
    let winv = DMatrix::from_diagonal(&DVector::from_column_slice(inv_w));
    let aw = &a * &winv;
    let gram = &aw * a.transpose();
    let resid = b - &a * &s;
    let y = gram.pseudo_inverse(1e-12).ok()? * resid;
    let x = s + aw.transpose() * y;
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

/// Move an optimal solution towards the minimum-norm optimal point.
///
/// The norm covers only variables not excluded via
/// [`LinearProgram::exclude_from_norm`]. Returns `solution` unchanged when it
/// is not optimal or no improvement is found.
pub fn min_norm_refine(lp: &LinearProgram, solution: &LpSolution, max_iters: usize) -> LpSolution {
    if solution.status != LpStatus::Optimal || max_iters == 0 {
        return solution.clone();
    }
    let n = lp.n_vars();
    let x0 = &solution.variable_values;
    let weights: Vec<f64> = (0..n)
        .map(|j| if lp.in_norm(j) { 1.0 } else { EXCLUDED_WEIGHT })
        .collect();
    let inv_w: Vec<f64> = weights.iter().map(|w| 1.0 / w).collect();
    let scaled = |a: &[f64]| a.iter().zip(&inv_w).map(|(v, w)| v * v * w).sum::<f64>();

    let mut rows = Vec::with_capacity(lp.n_cons() + n + 1);
    for r in 0..lp.n_cons() {
        let a = lp.row(r);
        rows.push(Row {
            coeffs: RowCoeffs::Dense(a),
            rhs: lp.rhs()[r],
            equality: lp.sense(r) == RowSense::Eq,
            scaled_norm: scaled(a),
        });
    }
    for j in 0..n {
        if lp.bound(j) == VarBound::NonNegative {
            rows.push(Row {
                coeffs: RowCoeffs::NegUnit(j),
                rhs: 0.0,
                equality: false,
                scaled_norm: inv_w[j],
            });
        }
    }
    let opt = lp.evaluate(x0);
    rows.push(Row {
        coeffs: RowCoeffs::NegObjective(lp.objective()),
        rhs: -opt,
        equality: false,
        scaled_norm: scaled(lp.objective()),
    });

    // Project the point that keeps excluded coordinates at their input values.
    let start: Vec<f64> = (0..n).map(|j| if lp.in_norm(j) { 0.0 } else { x0[j] }).collect();
    let mut z = start.clone();
    let mut mu = vec![0.0; rows.len()];
    for _ in 0..max_iters {
        let mut moved: f64 = 0.0;
        for (row, m) in rows.iter().zip(mu.iter_mut()) {
            if row.scaled_norm == 0.0 {
                continue;
            }
            let g = row.value(&z) - row.rhs;
            let mut next = *m + g / row.scaled_norm;
            if !row.equality {
                next = next.max(0.0);
            }
            let delta = next - *m;
            if delta != 0.0 {
                row.step(&mut z, &inv_w, delta);
                moved = moved.max((delta * row.scaled_norm.sqrt()).abs());
                *m = next;
            }
        }
        if moved < 1e-13 {
            break;
        }
    }

    if let Some(polished) = polish(&rows, &mu, &start, &inv_w, n) {
        z = polished;
    }

    // Largest t in [0, 1] with x0 + t (z - x0) feasible.
    let scale = 1.0 + x0.iter().chain(&z).fold(0.0f64, |a, v| a.max(v.abs()));
    let allow = 0.5 * PRIMAL_TOL;
    let mut t_max: f64 = 1.0;
    for row in &rows {
        let g0 = row.value(x0) - row.rhs;
        let gz = row.value(&z) - row.rhs;
        let limit = |g0: f64, gz: f64| {
            let a = g0.max(allow);
            if gz > a {
                ((a - g0) / (gz - g0)).clamp(0.0, 1.0)
            } else {
                1.0
            }
        };
        t_max = t_max.min(limit(g0, gz));
        if row.equality {
            t_max = t_max.min(limit(-g0, -gz));
        }
    }

    // Minimise the norm of x0 + t d over [0, t_max].
    let d: Vec<f64> = z.iter().zip(x0).map(|(a, b)| a - b).collect();
    let mut dd = 0.0;
    let mut xd = 0.0;
    let mut xx = 0.0;
    for j in (0..n).filter(|&j| lp.in_norm(j)) {
        dd += d[j] * d[j];
        xd += x0[j] * d[j];
        xx += x0[j] * x0[j];
    }
    if dd == 0.0 {
        return solution.clone();
    }
    let t = (-xd / dd).clamp(0.0, t_max);
    let gain = -(2.0 * t * xd + t * t * dd);
    if t == 0.0 || gain <= 1e-12 * (xx + scale) {
        return solution.clone();
    }
    let x: Vec<f64> = x0.iter().zip(&d).map(|(a, b)| a + t * b).collect();
    let objective_value = lp.evaluate(&x);
    if (objective_value - opt).abs() > 1e-9 * (1.0 + opt.abs()) || lp.max_violation(&x) > PRIMAL_TOL {
        return solution.clone();
    }
    LpSolution {
        variable_values: x,
        objective_value,
        status: LpStatus::Optimal,
        basis: solution.basis.clone(),
        row_duals: solution.row_duals.clone(),
    }
}
