//! Transportation simplex for discrete optimal transport.
//!
//! Solves `min sum c[j][i] pi[j][i]` over couplings with row marginal
//! `pmf_0` and column marginal `pmf_1`. The basis is a spanning tree on the
//! bipartite graph of rows and columns; node potentials on the tree are the
//! dual variables. Starts from the north-west corner rule, which on sorted
//! supports is the comonotone coupling, or from a caller-supplied basis.

use crate::error::{invalid, Error, Result};

/// Dual potentials of an optimal transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportDual {
    pub potentials_0: Vec<f64>,
    pub potentials_1: Vec<f64>,
    pub objective_value: f64,
}

/// Primal and dual solution of an optimal transport problem.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub dual: TransportDual,
    /// Row-major `m0 x m1` optimal coupling.
    pub coupling: Vec<f64>,
    pub primal_cost: f64,
    pub pivots: usize,
    /// Basic cells (`j * m1 + i`) of the optimal spanning tree, usable as a
    /// warm start for a problem of the same shape.
    pub basis: Vec<usize>,
}

const MARGINAL_TOL: f64 = 1e-12;
const NONE: usize = usize::MAX;

fn check_pmf(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return invalid(format!("{name} is empty"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid(format!("{name} has negative or non-finite mass"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > MARGINAL_TOL * p.len().max(1) as f64 {
        return invalid(format!("{name} sums to {s}, not 1"));
    }
    Ok(())
}

/// Dual potentials of the optimal transport problem with row-major cost
/// `cost[j * m1 + i]`.
pub fn solve_ot_dual(pmf_0: &[f64], pmf_1: &[f64], cost: &[f64]) -> Result<TransportDual> {
    solve_transport(pmf_0, pmf_1, cost).map(|p| p.dual)
}

/// Full transportation simplex solve from the north-west corner basis.
pub fn solve_transport(pmf_0: &[f64], pmf_1: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    solve_transport_warm(pmf_0, pmf_1, cost, None)
}

/// Transportation simplex started from `basis` when it is a spanning tree
/// whose flows are nonnegative under these marginals, otherwise from the
/// north-west corner.
pub fn solve_transport_warm(
    pmf_0: &[f64],
    pmf_1: &[f64],
    cost: &[f64],
    basis: Option<&[usize]>,
) -> Result<TransportPlan> {
    check_pmf(pmf_0, "pmf_0")?;
    check_pmf(pmf_1, "pmf_1")?;
    let (m0, m1) = (pmf_0.len(), pmf_1.len());
    if cost.len() != m0 * m1 {
        return invalid(format!(
            "cost has {} entries, expected {m0} x {m1}",
            cost.len()
        ));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return invalid("cost matrix has non-finite entries");
    }
    let mut t = TreeState::new(m0, m1, cost);
    let warm = basis.is_some_and(|b| t.load_basis(pmf_0, pmf_1, b));
    if !warm {
        t.north_west(pmf_0, pmf_1);
    }
    t.optimize()?;
    Ok(t.into_plan(pmf_0, pmf_1))
}

/// Spanning-tree basis. Node ids: rows `0..m0`, columns `m0..m0 + m1`.
/// Basic cell in slot `k` owns half-edges `2k` (at its row) and `2k + 1`
/// (at its column), kept in intrusive singly linked adjacency lists.
struct TreeState<'a> {
    m0: usize,
    m1: usize,
    cost: &'a [f64],
    flow: Vec<f64>,
    basic: Vec<bool>,
    cells: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
    head: Vec<usize>,
    next: Vec<usize>,
    parent: Vec<usize>,
    parent_cell: Vec<usize>,
    depth: Vec<usize>,
    stack: Vec<usize>,
    pivots: usize,
}

impl<'a> TreeState<'a> {
    fn new(m0: usize, m1: usize, cost: &'a [f64]) -> Self {
        let n = m0 + m1;
        Self {
            m0,
            m1,
            cost,
            flow: vec![0.0; m0 * m1],
            basic: vec![false; m0 * m1],
            cells: Vec::with_capacity(n - 1),
            u: vec![0.0; m0],
            v: vec![0.0; m1],
            head: vec![NONE; n],
            next: vec![NONE; 2 * (n - 1)],
            parent: vec![NONE; n],
            parent_cell: vec![NONE; n],
            depth: vec![0; n],
            stack: Vec::with_capacity(n),
            pivots: 0,
        }
    }

    fn ends(&self, cell: usize) -> (usize, usize) {
        (cell / self.m1, self.m0 + cell % self.m1)
    }

    /// Far endpoint of half-edge `h`.
    fn across(&self, h: usize) -> usize {
        let (row, col) = self.ends(self.cells[h >> 1]);
        if h & 1 == 0 {
            col
        } else {
            row
        }
    }

    fn link(&mut self, k: usize) {
        let (row, col) = self.ends(self.cells[k]);
        self.next[2 * k] = self.head[row];
        self.head[row] = 2 * k;
        self.next[2 * k + 1] = self.head[col];
        self.head[col] = 2 * k + 1;
    }

    fn unlink(&mut self, k: usize) {
        let (row, col) = self.ends(self.cells[k]);
        for (node, h) in [(row, 2 * k), (col, 2 * k + 1)] {
            if self.head[node] == h {
                self.head[node] = self.next[h];
                continue;
            }
            let mut p = self.head[node];
            while self.next[p] != h {
                p = self.next[p];
            }
            self.next[p] = self.next[h];
        }
    }

    fn push_cell(&mut self, c: usize) {
        self.basic[c] = true;
        self.cells.push(c);
        self.link(self.cells.len() - 1);
    }

    fn north_west(&mut self, a: &[f64], b: &[f64]) {
        let (m0, m1) = (self.m0, self.m1);
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let (mut j, mut i) = (0, 0);
        loop {
            let q = ra[j].min(rb[i]).max(0.0);
            let c = j * m1 + i;
            self.flow[c] = q;
            self.push_cell(c);
            ra[j] -= q;
            rb[i] -= q;
            if j == m0 - 1 && i == m1 - 1 {
                break;
            }
            if i == m1 - 1 || (j < m0 - 1 && ra[j] <= rb[i]) {
                j += 1;
            } else {
                i += 1;
            }
        }
    }

    /// Install `cells` as the basis. Tree flows are forced by the
    /// marginals; peel leaves to find them. Returns false, leaving the state
    /// empty, when `cells` is not a tree or a flow would be negative.
    fn load_basis(&mut self, a: &[f64], b: &[f64], cells: &[usize]) -> bool {
        let (m0, m1) = (self.m0, self.m1);
        let n = m0 + m1;
        if cells.len() != n - 1 || cells.iter().any(|&c| c >= m0 * m1) {
            return false;
        }
        for &c in cells {
            if self.basic[c] {
                self.reset();
                return false;
            }
            self.push_cell(c);
        }
        let mut remaining: Vec<f64> = a.iter().chain(b).copied().collect();
        let mut degree = vec![0usize; n];
        for &c in cells {
            let (row, col) = self.ends(c);
            degree[row] += 1;
            degree[col] += 1;
        }
        let mut done = vec![false; n - 1];
        let mut leaves: Vec<usize> = (0..n).filter(|&k| degree[k] == 1).collect();
        let mut assigned = 0;
        let mut ok = true;
        while let Some(node) = leaves.pop() {
            if degree[node] != 1 {
                continue;
            }
            let mut h = self.head[node];
            while h != NONE && done[h >> 1] {
                h = self.next[h];
            }
            if h == NONE {
                ok = false;
                break;
            }
            let q = remaining[node];
            if q < -1e-12 {
                ok = false;
                break;
            }
            let k = h >> 1;
            self.flow[self.cells[k]] = q.max(0.0);
            done[k] = true;
            assigned += 1;
            let other = self.across(h);
            remaining[node] = 0.0;
            remaining[other] -= q;
            degree[node] = 0;
            degree[other] -= 1;
            if degree[other] == 1 {
                leaves.push(other);
            }
        }
        if !ok || assigned != n - 1 {
            self.reset();
            return false;
        }
        true
    }

    fn reset(&mut self) {
        for &c in &self.cells {
            self.basic[c] = false;
            self.flow[c] = 0.0;
        }
        self.cells.clear();
        self.head.iter_mut().for_each(|h| *h = NONE);
    }

    /// Make `parent` the parent of `node` through `cell` and set its potential.
    fn attach(&mut self, node: usize, parent: usize, cell: usize) {
        self.parent[node] = parent;
        self.parent_cell[node] = cell;
        self.depth[node] = self.depth[parent] + 1;
        if node >= self.m0 {
            self.v[node - self.m0] = self.cost[cell] - self.u[parent];
        } else {
            self.u[node] = self.cost[cell] - self.v[parent - self.m0];
        }
    }

    /// Depth-first relabelling of the subtree below `start`. Returns the
    /// number of nodes visited.
    fn relabel_from(&mut self, start: usize) -> usize {
        let mut stack = std::mem::take(&mut self.stack);
        stack.clear();
        stack.push(start);
        let mut seen = 1;
        while let Some(node) = stack.pop() {
            let mut h = self.head[node];
            while h != NONE {
                let nb = self.across(h);
                let cell = self.cells[h >> 1];
                if cell != self.parent_cell[node] {
                    self.attach(nb, node, cell);
                    stack.push(nb);
                    seen += 1;
                }
                h = self.next[h];
            }
        }
        self.stack = stack;
        seen
    }

    /// Parents, depths and potentials from scratch, rooted at row 0.
    fn build_tree(&mut self) -> Result<()> {
        self.parent[0] = NONE;
        self.parent_cell[0] = NONE;
        self.depth[0] = 0;
        self.u[0] = 0.0;
        let n = self.m0 + self.m1;
        // A cycle would revisit nodes, so cap the walk.
        if self.relabel_from(0) != n {
            return Err(Error::Numerical("transport basis is not a spanning tree".into()));
        }
        Ok(())
    }

    /// Update the tree after `enter` replaced `leave` in slot `k`. Only the
    /// subtree cut off by `leave` changes.
    fn rehang(&mut self, k: usize, enter: usize, leave: usize) {
        let (jl, il) = self.ends(leave);
        let child = if self.parent_cell[jl] == leave { jl } else { il };
        let (je, ie) = self.ends(enter);
        let mut node = je;
        let in_subtree = loop {
            if node == child {
                break true;
            }
            if self.parent[node] == NONE {
                break false;
            }
            node = self.parent[node];
        };
        let (start, anchor) = if in_subtree { (je, ie) } else { (ie, je) };
        self.unlink(k);
        self.cells[k] = enter;
        self.link(k);
        self.attach(start, anchor, enter);
        self.relabel_from(start);
    }

    fn optimize(&mut self) -> Result<()> {
        let (m0, m1) = (self.m0, self.m1);
        let scale = self.cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        let tol = 1e-11 * scale;
        let max_pivots = 50 * (m0 + m1) * (m0 + m1) + 1000;
        let stall_limit = 3 * (m0 + m1);
        let mut stall = 0usize;
        let mut bland = false;
        let mut path_plus: Vec<usize> = Vec::new();
        let mut path_minus: Vec<usize> = Vec::new();
        let mut from_a: Vec<usize> = Vec::new();
        let mut from_b: Vec<usize> = Vec::new();
        let mut next_row = 0usize;
        self.build_tree()?;
        loop {
            let entering = if bland {
                self.price_bland(tol)
            } else {
                self.price_block(tol, &mut next_row)
            };
            let Some(enter) = entering else {
                return Ok(());
            };
            if self.pivots >= max_pivots {
                return Err(Error::IterationLimit(format!(
                    "transport simplex exceeded {max_pivots} pivots"
                )));
            }
            // Cycle: tree path from the entering column to the entering row.
            let (je, ie) = self.ends(enter);
            let (mut a, mut b) = (ie, je);
            from_a.clear();
            from_b.clear();
            while self.depth[a] > self.depth[b] {
                from_a.push(self.parent_cell[a]);
                a = self.parent[a];
            }
            while self.depth[b] > self.depth[a] {
                from_b.push(self.parent_cell[b]);
                b = self.parent[b];
            }
            while a != b {
                from_a.push(self.parent_cell[a]);
                a = self.parent[a];
                from_b.push(self.parent_cell[b]);
                b = self.parent[b];
            }
            // Signs alternate along the path, starting with '-'.
            path_plus.clear();
            path_minus.clear();
            for (k, &c) in from_a.iter().chain(from_b.iter().rev()).enumerate() {
                if k % 2 == 0 {
                    path_minus.push(c);
                } else {
                    path_plus.push(c);
                }
            }
            let mut leave = path_minus[0];
            let mut theta = self.flow[leave];
            for &c in &path_minus[1..] {
                let f = self.flow[c];
                if f < theta || (f == theta && bland && c < leave) {
                    theta = f;
                    leave = c;
                }
            }
            let theta = theta.max(0.0);
            for &c in &path_plus {
                self.flow[c] += theta;
            }
            for &c in &path_minus {
                self.flow[c] -= theta;
            }
            self.flow[leave] = 0.0;
            self.flow[enter] = theta;
            self.basic[leave] = false;
            self.basic[enter] = true;
            let k = self
                .cells
                .iter()
                .position(|&c| c == leave)
                .expect("leaving cell is basic");
            self.rehang(k, enter, leave);
            self.pivots += 1;
            if theta > 0.0 {
                stall = 0;
            } else {
                stall += 1;
                if stall > stall_limit {
                    bland = true;
                }
            }
        }
    }

    /// First improving cell in index order.
    fn price_bland(&self, tol: f64) -> Option<usize> {
        for j in 0..self.m0 {
            for i in 0..self.m1 {
                let c = j * self.m1 + i;
                if self.cost[c] - self.u[j] - self.v[i] < -tol && !self.basic[c] {
                    return Some(c);
                }
            }
        }
        None
    }

    /// Block search: scan rows cyclically from `next_row` in blocks of
    /// roughly `sqrt(m0 m1)` cells and return the most negative reduced cost
    /// of the first block that has one.
    fn price_block(&self, tol: f64, next_row: &mut usize) -> Option<usize> {
        let (m0, m1) = (self.m0, self.m1);
        let block = ((m0 * m1) as f64).sqrt().ceil() as usize;
        let mut best = -tol;
        let mut entering = None;
        let mut scanned = 0;
        for step in 0..m0 {
            let j = (*next_row + step) % m0;
            let uj = self.u[j];
            let row = &self.cost[j * m1..(j + 1) * m1];
            for (i, (c, vi)) in row.iter().zip(&self.v).enumerate() {
                let r = c - uj - vi;
                if r < best && !self.basic[j * m1 + i] {
                    best = r;
                    entering = Some(j * m1 + i);
                }
            }
            scanned += m1;
            if entering.is_some() && scanned >= block {
                *next_row = (j + 1) % m0;
                return entering;
            }
        }
        entering
    }

    fn into_plan(self, a: &[f64], b: &[f64]) -> TransportPlan {
        let primal_cost: f64 = self
            .cells
            .iter()
            .map(|&c| self.cost[c] * self.flow[c])
            .sum();
        let objective_value = a.iter().zip(&self.u).map(|(p, u)| p * u).sum::<f64>()
            + b.iter().zip(&self.v).map(|(p, v)| p * v).sum::<f64>();
        TransportPlan {
            dual: TransportDual {
                potentials_0: self.u,
                potentials_1: self.v,
                objective_value,
            },
            coupling: self.flow,
            primal_cost,
            pivots: self.pivots,
            basis: self.cells,
        }
    }
}
