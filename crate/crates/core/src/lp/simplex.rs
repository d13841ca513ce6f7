//! Dense revised simplex.
//!
//! The user program `max c.x s.t. A x <= b` is solved through its dual
//! standard form `min b.y s.t. A^T y = c, y >= 0`: each user row becomes a
//! column, so the basis has one row per user variable. The conditional
//! dual programs have far more rows than variables, which keeps the basis
//! small. The user solution is read off the simplex multipliers.

use super::{dot, LinearProgram, LpSolution, LpStatus, RowSense, VarBound, REDUCED_COST_TOL};
use crate::error::Result;

const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;

#[derive(Clone, Copy, Debug)]
enum Origin {
    Row { r: usize, negated: bool },
    Bound { var: usize },
    Artificial,
}

struct StandardForm {
    m: usize,
    cols: Vec<Vec<(usize, f64)>>,
    costs: Vec<f64>,
    origin: Vec<Origin>,
    rhs: Vec<f64>,
    flipped: Vec<bool>,
}

impl StandardForm {
    fn from_program(lp: &LinearProgram, objective: &[f64]) -> Self {
        let m = lp.n_vars();
        let flipped: Vec<bool> = objective.iter().map(|c| *c < 0.0).collect();
        let sign = |i: usize| if flipped[i] { -1.0 } else { 1.0 };
        let rhs: Vec<f64> = objective.iter().map(|c| c.abs()).collect();
        let mut cols = Vec::new();
        let mut costs = Vec::new();
        let mut origin = Vec::new();
        for r in 0..lp.n_cons() {
            let col: Vec<(usize, f64)> = lp
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, a)| **a != 0.0)
                .map(|(i, a)| (i, a * sign(i)))
                .collect();
            if lp.sense(r) == RowSense::Eq {
                cols.push(col.iter().map(|(i, a)| (*i, -a)).collect());
                costs.push(-lp.rhs()[r]);
                origin.push(Origin::Row { r, negated: true });
            }
            cols.push(col);
            costs.push(lp.rhs()[r]);
            origin.push(Origin::Row { r, negated: false });
        }
        for j in 0..m {
            if lp.bound(j) == VarBound::NonNegative {
                cols.push(vec![(j, -sign(j))]);
                costs.push(0.0);
                origin.push(Origin::Bound { var: j });
            }
        }
        for i in 0..m {
            cols.push(vec![(i, 1.0)]);
            costs.push(0.0);
            origin.push(Origin::Artificial);
        }
        Self {
            m,
            cols,
            costs,
            origin,
            rhs,
            flipped,
        }
    }

    fn is_artificial(&self, j: usize) -> bool {
        matches!(self.origin[j], Origin::Artificial)
    }
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
    IterationLimit,
}

struct Tableau<'a> {
    sf: &'a StandardForm,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    iters: usize,
    max_iters: usize,
    bland: bool,
    stall_limit: usize,
}

impl<'a> Tableau<'a> {
    fn new(sf: &'a StandardForm, max_iters: usize, stall_limit: usize) -> Self {
        let m = sf.m;
        let n = sf.cols.len();
        let basis: Vec<usize> = (n - m..n).collect();
        let mut is_basic = vec![false; n];
        for &b in &basis {
            is_basic[b] = true;
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        Self {
            sf,
            basis,
            is_basic,
            binv,
            xb: sf.rhs.clone(),
            iters: 0,
            max_iters,
            bland: false,
            stall_limit,
        }
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.sf.m;
        let mut u = vec![0.0; m];
        for &(k, a) in &self.sf.cols[j] {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += self.binv[i * m + k] * a;
            }
        }
        u
    }

    fn multipliers(&self, costs: &[f64]) -> Vec<f64> {
        let m = self.sf.m;
        let mut pi = vec![0.0; m];
        for (k, &b) in self.basis.iter().enumerate() {
            let cb = costs[b];
            if cb != 0.0 {
                let row = &self.binv[k * m..(k + 1) * m];
                for (p, r) in pi.iter_mut().zip(row) {
                    *p += cb * r;
                }
            }
        }
        pi
    }

    fn reduced_cost(&self, costs: &[f64], pi: &[f64], j: usize) -> f64 {
        costs[j] - self.sf.cols[j].iter().map(|&(k, a)| pi[k] * a).sum::<f64>()
    }

    fn objective(&self, costs: &[f64]) -> f64 {
        self.basis
            .iter()
            .zip(&self.xb)
            .map(|(&b, x)| costs[b] * x)
            .sum()
    }

    fn pivot(&mut self, entering: usize, row: usize, u: &[f64]) {
        let m = self.sf.m;
        let piv = u[row];
        let theta = self.xb[row] / piv;
        for i in 0..m {
            if i != row {
                self.xb[i] -= theta * u[i];
            }
        }
        self.xb[row] = theta;
        {
            let (head, tail) = self.binv.split_at_mut(row * m);
            let (prow, rest) = tail.split_at_mut(m);
            for v in prow.iter_mut() {
                *v /= piv;
            }
            for (i, chunk) in head.chunks_mut(m).enumerate() {
                let f = u[i];
                if f != 0.0 {
                    for (c, p) in chunk.iter_mut().zip(prow.iter()) {
                        *c -= f * p;
                    }
                }
            }
            for (off, chunk) in rest.chunks_mut(m).enumerate() {
                let f = u[row + 1 + off];
                if f != 0.0 {
                    for (c, p) in chunk.iter_mut().zip(prow.iter()) {
                        *c -= f * p;
                    }
                }
            }
        }
        let leaving = self.basis[row];
        self.is_basic[leaving] = false;
        self.is_basic[entering] = true;
        self.basis[row] = entering;
        self.iters += 1;
        if self.iters % REFACTOR_EVERY == 0 {
            // A failed refactor keeps the product-form inverse.
            let _ = self.refactor();
        }
    }

    /// Recompute the basis inverse from scratch by Gauss-Jordan elimination.
    fn refactor(&mut self) -> bool {
        let m = self.sf.m;
        let mut b = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            for &(i, a) in &self.sf.cols[j] {
                b[i * m + k] = a;
            }
        }
        let Some(inv) = invert(&mut b, m) else {
            return false;
        };
        self.binv = inv;
        let mut xb = vec![0.0; m];
        for (i, x) in xb.iter_mut().enumerate() {
            *x = dot(&self.binv[i * m..(i + 1) * m], &self.sf.rhs);
        }
        for x in xb.iter_mut() {
            if *x < 0.0 && *x > -1e-11 {
                *x = 0.0;
            }
        }
        self.xb = xb;
        true
    }

    fn run(&mut self, costs: &[f64], allow_artificial: bool) -> PhaseOutcome {
        let n = self.sf.cols.len();
        let mut best_obj = self.objective(costs);
        let mut stall = 0usize;
        loop {
            let pi = self.multipliers(costs);
            let mut entering = None;
            let mut best = -REDUCED_COST_TOL;
            for j in 0..n {
                if self.is_basic[j] || (!allow_artificial && self.sf.is_artificial(j)) {
                    continue;
                }
                let d = self.reduced_cost(costs, &pi, j);
                if d < best {
                    entering = Some(j);
                    if self.bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(q) = entering else {
                return PhaseOutcome::Optimal;
            };
            if self.iters >= self.max_iters {
                return PhaseOutcome::IterationLimit;
            }
            let u = self.ftran(q);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..self.sf.m {
                if u[i] <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.xb[i].max(0.0) / u[i];
                let take = match leave {
                    None => true,
                    Some(l) => {
                        if ratio < best_ratio - 1e-12 {
                            true
                        } else if ratio <= best_ratio + 1e-12 {
                            if self.bland {
                                self.basis[i] < self.basis[l]
                            } else {
                                u[i] > u[l]
                            }
                        } else {
                            false
                        }
                    }
                };
                if take {
                    leave = Some(i);
                    best_ratio = best_ratio.min(ratio);
                }
            }
            let Some(r) = leave else {
                return PhaseOutcome::Unbounded;
            };
            self.pivot(q, r, &u);
            let obj = self.objective(costs);
            if obj < best_obj - 1e-12 * best_obj.abs().max(1.0) {
                best_obj = obj;
                stall = 0;
            } else {
                stall += 1;
                if stall > self.stall_limit && !self.bland {
                    log::debug!("simplex: switching to Bland's rule after {stall} stalled pivots");
                    self.bland = true;
                }
            }
        }
    }

    /// Pivot zero-valued artificials out of the basis where possible.
    fn drive_out_artificials(&mut self) {
        let m = self.sf.m;
        let n = self.sf.cols.len();
        for row in 0..m {
            if !self.sf.is_artificial(self.basis[row]) {
                continue;
            }
            let brow = self.binv[row * m..(row + 1) * m].to_vec();
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if self.is_basic[j] || self.sf.is_artificial(j) {
                    continue;
                }
                let v: f64 = self.sf.cols[j].iter().map(|&(k, a)| brow[k] * a).sum();
                if v.abs() > PIVOT_TOL && best.map_or(true, |(_, b)| v.abs() > b.abs()) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                self.xb[row] = 0.0;
                let u = self.ftran(j);
                self.pivot(j, row, &u);
            }
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting; `a` is consumed as scratch.
fn invert(a: &mut [f64], m: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if a[piv * m + col].abs() < 1e-13 {
            return None;
        }
        if piv != col {
            for k in 0..m {
                a.swap(piv * m + k, col * m + k);
                inv.swap(piv * m + k, col * m + k);
            }
        }
        let p = a[col * m + col];
        for k in 0..m {
            a[col * m + k] /= p;
            inv[col * m + k] /= p;
        }
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = a[r * m + col];
            if f != 0.0 {
                for k in 0..m {
                    a[r * m + k] -= f * a[col * m + k];
                    inv[r * m + k] -= f * inv[col * m + k];
                }
            }
        }
    }
    Some(inv)
}

enum StdOutcome<'a> {
    Optimal(Tableau<'a>),
    Infeasible,
    Unbounded,
    IterationLimit,
}

fn solve_standard(sf: &StandardForm, max_iters: usize, stall_limit: usize) -> StdOutcome<'_> {
    let mut t = Tableau::new(sf, max_iters, stall_limit);
    let phase1: Vec<f64> = (0..sf.cols.len())
        .map(|j| if sf.is_artificial(j) { 1.0 } else { 0.0 })
        .collect();
    match t.run(&phase1, true) {
        PhaseOutcome::IterationLimit => return StdOutcome::IterationLimit,
        PhaseOutcome::Unbounded => return StdOutcome::Infeasible,
        PhaseOutcome::Optimal => {}
    }
    t.refactor();
    let scale = sf.rhs.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    if t.objective(&phase1) > 1e-9 * scale {
        return StdOutcome::Infeasible;
    }
    t.drive_out_artificials();
    t.refactor();
    match t.run(&sf.costs, false) {
        PhaseOutcome::IterationLimit => StdOutcome::IterationLimit,
        PhaseOutcome::Unbounded => StdOutcome::Unbounded,
        PhaseOutcome::Optimal => {
            t.refactor();
            StdOutcome::Optimal(t)
        }
    }
}

/// Solve `lp` by the revised simplex with at most `max_iters` pivots.
///
/// Dantzig pricing is used until `3 (n_vars + n_cons)` consecutive pivots
/// fail to improve the objective, after which Bland's rule takes over and
/// guarantees termination.
pub fn solve_lp(lp: &LinearProgram, max_iters: usize) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.n_vars();
    let stall_limit = 3 * (lp.n_vars() + lp.n_cons());
    let sf = StandardForm::from_program(lp, lp.objective());
    let outcome = solve_standard(&sf, max_iters, stall_limit);
    let result = match outcome {
        StdOutcome::IterationLimit => LpSolution::failed(LpStatus::IterationLimit, n),
        StdOutcome::Unbounded => LpSolution::failed(LpStatus::Infeasible, n),
        StdOutcome::Infeasible => {
            // Either the program is unbounded or it has no feasible point;
            // a zero objective separates the two cases.
            let zero = StandardForm::from_program(lp, &vec![0.0; n]);
            let status = match solve_standard(&zero, max_iters, stall_limit) {
                StdOutcome::Unbounded => LpStatus::Infeasible,
                StdOutcome::IterationLimit => LpStatus::IterationLimit,
                _ => LpStatus::Unbounded,
            };
            LpSolution::failed(status, n)
        }
        StdOutcome::Optimal(t) => extract(lp, &t),
    };
    Ok(result)
}

fn extract(lp: &LinearProgram, t: &Tableau<'_>) -> LpSolution {
    let sf = t.sf;
    let pi = t.multipliers(&sf.costs);
    let x: Vec<f64> = pi
        .iter()
        .zip(&sf.flipped)
        .map(|(p, f)| if *f { -p } else { *p })
        .collect();
    let mut row_duals = vec![0.0; lp.n_cons()];
    let mut basis = Vec::new();
    for (k, &j) in t.basis.iter().enumerate() {
        match sf.origin[j] {
            Origin::Row { r, negated } => {
                row_duals[r] += if negated { -t.xb[k] } else { t.xb[k] };
                basis.push(r);
            }
            Origin::Bound { var } => basis.push(lp.n_cons() + var),
            Origin::Artificial => {}
        }
    }
    basis.sort_unstable();
    basis.dedup();
    LpSolution {
        objective_value: lp.evaluate(&x),
        variable_values: x,
        status: LpStatus::Optimal,
        basis,
        row_duals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_lp() -> LinearProgram {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.set_bound(0, VarBound::NonNegative);
        lp.add_row(&[1.0], RowSense::Le, 1.0);
        lp
    }

    #[test]
    fn single_variable_box() {
        let sol = solve_lp(&box_lp(), 100).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.variable_values[0] - 1.0).abs() < 1e-12);
        assert!((sol.objective_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_and_infeasible_are_statuses() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add_row(&[-1.0], RowSense::Le, 0.0);
        assert_eq!(solve_lp(&lp, 100).unwrap().status, LpStatus::Unbounded);

        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add_row(&[1.0], RowSense::Le, -1.0);
        lp.add_row(&[-1.0], RowSense::Le, -1.0);
        assert_eq!(solve_lp(&lp, 100).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut lp = box_lp();
        lp.add_row(&[f64::NAN], RowSense::Le, 1.0);
        assert!(solve_lp(&lp, 100).is_err());
    }

    #[test]
    fn equality_rows() {
        // max x + y s.t. x + y = 2, x - y <= 0, x >= 0
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.set_bound(0, VarBound::NonNegative);
        lp.add_row(&[1.0, 1.0], RowSense::Eq, 2.0);
        lp.add_row(&[1.0, -1.0], RowSense::Le, 0.0);
        let sol = solve_lp(&lp, 100).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.objective_value - 4.0).abs() < 1e-10);
        assert!(sol.variable_values[0].abs() < 1e-10);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let mut lp = LinearProgram::new(vec![1.0, 1.0, 1.0]);
        for j in 0..3 {
            let mut row = vec![0.0; 3];
            row[j] = 1.0;
            lp.add_row(&row, RowSense::Le, 1.0 + j as f64);
        }
        let sol = solve_lp(&lp, 0).unwrap();
        assert_eq!(sol.status, LpStatus::IterationLimit);
    }
}
