//! Summands, one-sided confidence bounds, the delta method, quasilinear
//! root search and two-sided intervals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dual::{evaluate_dual, DualSolution, OutcomePoint, Side};
use crate::error::{invalid, Error, Result};
use crate::stats::{mean, norm_cdf, norm_quantile, sample_var};

/// Per-observation summands for `K` candidate duals, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummandTable {
    /// `columns[k][i]` is observation `i`'s summand under model `k`.
    pub columns: Vec<Vec<f64>>,
    /// Summands of identified moments (delta-method estimands).
    pub kappa_columns: Option<Vec<Vec<f64>>>,
    pub fold_of: Vec<usize>,
    pub cluster_of: Option<Vec<usize>>,
}

impl SummandTable {
    pub fn new(columns: Vec<Vec<f64>>, fold_of: Vec<usize>) -> Result<Self> {
        let t = Self { columns, kappa_columns: None, fold_of, cluster_of: None };
        t.validate()?;
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return invalid("summand table has no model columns");
        }
        let n = self.fold_of.len();
        let kappa = self.kappa_columns.iter().flatten();
        for (k, col) in self.columns.iter().chain(kappa).enumerate() {
            if col.len() != n {
                return invalid(format!("summand column {k} has {} rows, expected {n}", col.len()));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return invalid(format!("summand column {k} row {i} is not finite"));
            }
        }
        if let Some(c) = &self.cluster_of {
            if c.len() != n {
                return invalid("cluster assignment length differs from the summand table");
            }
        }
        Ok(())
    }
}

/// A point estimate with a one-sided confidence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub theta_hat: f64,
    pub se: f64,
    pub confidence_bound: f64,
    pub alpha: f64,
    pub side: Side,
    pub n_effective: usize,
    /// Set when every summand (or influence value) is identical.
    pub degenerate_variance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    #[serde(alias = "two_sided_bonferroni")]
    Bonferroni,
    /// Imbens-Manski critical value driven by the estimated bound gap.
    #[serde(alias = "imbens_manski_stoye")]
    ImbensManski,
}

/// Two-sided interval for the true parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub method: IntervalMethod,
    pub critical_value: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        invalid(format!("alpha {alpha} outside (0, 1)"))
    }
}

fn check_propensity(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        invalid(format!("propensity {p} must lie strictly inside (0, 1)"))
    }
}

/// IPW summand from the dual values at the observed outcome.
pub fn ipw_value(nu1: f64, nu0: f64, treated: bool, propensity: f64) -> Result<f64> {
    check_propensity(propensity)?;
    Ok(if treated { nu1 / propensity } else { nu0 / (1.0 - propensity) })
}

/// AIPW summand from dual values and their model-implied conditional means.
pub fn aipw_value(nu1: f64, nu0: f64, c1: f64, c0: f64, treated: bool, propensity: f64) -> Result<f64> {
    check_propensity(propensity)?;
    let resid = if treated { (nu1 - c1) / propensity } else { (nu0 - c0) / (1.0 - propensity) };
    Ok(resid + c1 + c0)
}

/// `nu_1(Y) W / pi + nu_0(Y) (1 - W) / (1 - pi)`; only the observed arm's
/// dual is evaluated.
pub fn ipw_summand(dual: &DualSolution, y: &OutcomePoint, treated: bool, propensity: f64) -> Result<f64> {
    check_propensity(propensity)?;
    let nu = evaluate_dual(dual, treated as u8, y)?;
    ipw_value(nu, nu, treated, propensity)
}

/// `W (nu_1 - c_1) / pi + (1 - W)(nu_0 - c_0) / (1 - pi) + c_1 + c_0`.
pub fn aipw_summand(
    dual: &DualSolution,
    y: &OutcomePoint,
    treated: bool,
    propensity: f64,
    c0: f64,
    c1: f64,
) -> Result<f64> {
    check_propensity(propensity)?;
    let nu = evaluate_dual(dual, treated as u8, y)?;
    aipw_value(nu, nu, c1, c0, treated, propensity)
}

/// Standard error of the mean, optionally cluster-robust (cluster-sum
/// estimator with the `G / (G - 1)` correction).
pub fn standard_error(values: &[f64], cluster_of: Option<&[usize]>) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return invalid(format!("need at least 2 summands, got {n}"));
    }
    let Some(clusters) = cluster_of else {
        return Ok((sample_var(values) / n as f64).sqrt());
    };
    if clusters.len() != n {
        return invalid("cluster assignment length differs from the summands");
    }
    let m = mean(values);
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for (v, g) in values.iter().zip(clusters) {
        *sums.entry(*g).or_default() += v - m;
    }
    let g = sums.len();
    if g < 2 {
        return invalid(format!("need at least 2 clusters, got {g}"));
    }
    let ss: f64 = sums.values().map(|e| e * e).sum();
    Ok((g as f64 / (g as f64 - 1.0) * ss).sqrt() / n as f64)
}

fn finish(theta_hat: f64, se: f64, alpha: f64, side: Side, n: usize) -> BoundEstimate {
    let z = norm_quantile(1.0 - alpha);
    let confidence_bound = match side {
        Side::Lower => theta_hat - z * se,
        Side::Upper => theta_hat + z * se,
    };
    BoundEstimate {
        theta_hat,
        se,
        confidence_bound,
        alpha,
        side,
        n_effective: n,
        degenerate_variance: se == 0.0,
    }
}

/// Mean of the summands with a one-sided normal confidence bound.
pub fn one_sided_bound(summands: &[f64], alpha: f64, side: Side, cluster_of: Option<&[usize]>) -> Result<BoundEstimate> {
    check_alpha(alpha)?;
    if let Some(i) = summands.iter().position(|v| !v.is_finite()) {
        return invalid(format!("summand {i} is not finite"));
    }
    let se = standard_error(summands, cluster_of)?;
    let theta = mean(summands);
    let mut se = se;
    if summands.iter().all(|v| *v == summands[0]) {
        se = 0.0;
    }
    Ok(finish(theta, se, alpha, side, summands.len()))
}

/// Pool cross-fitted summands. `summands[i]` is `None` when observation `i`
/// was never scored.
pub fn crossfit_bound(
    summands: &[Option<f64>],
    alpha: f64,
    side: Side,
    cluster_of: Option<&[usize]>,
) -> Result<BoundEstimate> {
    let mut pooled = Vec::with_capacity(summands.len());
    for (i, s) in summands.iter().enumerate() {
        match s {
            Some(v) => pooled.push(*v),
            None => return invalid(format!("observation {i} was not scored by any fold")),
        }
    }
    one_sided_bound(&pooled, alpha, side, cluster_of)
}

/// Compare an analytic gradient against central differences.
pub fn check_gradient(
    h: &dyn Fn(&[f64]) -> Result<f64>,
    grad: &[f64],
    at: &[f64],
    rel_tol: f64,
) -> Result<()> {
    if grad.len() != at.len() {
        return invalid(format!("gradient has {} entries for {} arguments", grad.len(), at.len()));
    }
    for j in 0..at.len() {
        let step = 1e-6 * at[j].abs().max(1.0);
        let mut hi = at.to_vec();
        let mut lo = at.to_vec();
        hi[j] += step;
        lo[j] -= step;
        let fd = (h(&hi)? - h(&lo)?) / (2.0 * step);
        if (fd - grad[j]).abs() > rel_tol * grad[j].abs().max(fd.abs()) + 1e-9 {
            return Err(Error::Numerical(format!(
                "gradient check failed in argument {j}: analytic {} vs finite difference {fd}",
                grad[j]
            )));
        }
    }
    Ok(())
}

/// Bound on `h(E[beta], E[kappa_1], ..)` by the delta method. The
/// standard error uses the influence values `grad_h' (row_i - mean)`.
pub fn delta_method_bound(
    beta_summands: &[f64],
    kappa_summands: &[&[f64]],
    h: &dyn Fn(&[f64]) -> Result<f64>,
    grad_h: &dyn Fn(&[f64]) -> Vec<f64>,
    alpha: f64,
    side: Side,
    cluster_of: Option<&[usize]>,
) -> Result<BoundEstimate> {
    check_alpha(alpha)?;
    let n = beta_summands.len();
    if kappa_summands.iter().any(|k| k.len() != n) {
        return invalid("moment summands differ in length from the bound summands");
    }
    let cols: Vec<&[f64]> = std::iter::once(beta_summands).chain(kappa_summands.iter().copied()).collect();
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let theta = h(&means)?;
    let g = grad_h(&means);
    check_gradient(h, &g, &means, 1e-4)?;
    let influence: Vec<f64> = (0..n)
        .map(|i| cols.iter().zip(&g).zip(&means).map(|((c, gj), m)| gj * (c[i] - m)).sum())
        .collect();
    let mut se = standard_error(&influence, cluster_of)?;
    if influence.iter().all(|v| *v == influence[0]) {
        se = 0.0;
    }
    Ok(finish(theta, se, alpha, side, n))
}

/// Outcome of a quasilinear root search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasilinearSearch {
    pub value: f64,
    pub evaluations: usize,
    pub grid_fallback: bool,
    pub endpoint_values: (f64, f64),
}

/// Locate the crossing of a nonincreasing confidence-bound curve
/// `c -> g(c)`. For `Side::Lower` the result is `min {c : g(c) <= 0}`, for
/// `Side::Upper` it is `max {c : g(c) >= 0}`. A curve that is not
/// monotone on the probes or during bisection is scanned on a 200-point
/// grid instead.
pub fn quasilinear_bound(
    bracket: (f64, f64),
    tol: f64,
    side: Side,
    mut bound_fn: impl FnMut(f64) -> Result<f64>,
) -> Result<QuasilinearSearch> {
    let (lo, hi) = bracket;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return invalid(format!("invalid bracket [{lo}, {hi}]"));
    }
    if !(tol > 0.0) {
        return invalid(format!("tolerance {tol} must be positive"));
    }
    let mut evaluations = 0usize;
    let mut eval = |c: f64| -> Result<f64> {
        evaluations += 1;
        let v = bound_fn(c)?;
        if v.is_nan() {
            return Err(Error::Numerical(format!("confidence bound at c = {c} is NaN")));
        }
        Ok(v)
    };
    let probes: Vec<f64> = (0..=10).map(|j| lo + (hi - lo) * j as f64 / 10.0).collect();
    let values = probes.iter().map(|&c| eval(c)).collect::<Result<Vec<_>>>()?;
    let (g_lo, g_hi) = (values[0], values[10]);
    let bracketed = match side {
        Side::Lower => g_lo > 0.0 && g_hi <= 0.0,
        Side::Upper => g_lo >= 0.0 && g_hi < 0.0,
    };
    if !bracketed {
        return invalid(format!(
            "no sign change in bracket [{lo}, {hi}]: bound is {g_lo} at the lower end and {g_hi} at the upper end"
        ));
    }
    let below = |v: f64| match side {
        Side::Lower => v <= 0.0,
        Side::Upper => v < 0.0,
    };
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let mut fallback = !monotone;
    let mut value = f64::NAN;
    if monotone {
        let j = values.iter().position(|&v| below(v)).expect("upper end is below");
        let (mut a, mut b) = (probes[j - 1], probes[j]);
        let (mut ga, mut gb) = (values[j - 1], values[j]);
        while b - a > tol {
            let mid = 0.5 * (a + b);
            let gm = eval(mid)?;
            if gm > ga || gm < gb {
                fallback = true;
                break;
            }
            if below(gm) {
                (b, gb) = (mid, gm);
            } else {
                (a, ga) = (mid, gm);
            }
        }
        value = match side {
            Side::Lower => a,
            Side::Upper => b,
        };
    }
    if fallback {
        let grid: Vec<f64> = (0..200).map(|j| lo + (hi - lo) * j as f64 / 199.0).collect();
        let vals = grid.iter().map(|&c| eval(c)).collect::<Result<Vec<_>>>()?;
        value = match side {
            Side::Lower => grid[vals.iter().position(|v| *v <= 0.0).expect("upper end is below")],
            Side::Upper => grid[vals.iter().rposition(|v| *v >= 0.0).expect("lower end is above")],
        };
    }
    Ok(QuasilinearSearch { value, evaluations, grid_fallback: fallback, endpoint_values: (g_lo, g_hi) })
}

/// Imbens-Manski critical value: solves
/// `Phi(c + gap / max_se) - Phi(-c) = 1 - alpha` by bisection.
pub fn imbens_manski_critical_value(gap: f64, max_se: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let gap = gap.max(0.0);
    let r = if max_se > 0.0 {
        gap / max_se
    } else if gap > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let f = |c: f64| norm_cdf(c + r) - norm_cdf(-c) - (1.0 - alpha);
    let (mut a, mut b) = (0.0_f64, 40.0_f64);
    if f(a) >= 0.0 {
        return Ok(0.0);
    }
    while b - a > 1e-10 {
        let m = 0.5 * (a + b);
        if f(m) >= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(b)
}

/// Two-sided interval from a lower and an upper one-sided estimate.
/// `corr` is the correlation of the two estimates; it is validated but
/// neither method uses it.
pub fn two_sided_interval(
    lower_est: &BoundEstimate,
    upper_est: &BoundEstimate,
    corr: f64,
    alpha: f64,
    method: IntervalMethod,
) -> Result<IntervalEstimate> {
    check_alpha(alpha)?;
    if lower_est.side != Side::Lower || upper_est.side != Side::Upper {
        return invalid("two-sided interval needs a lower and an upper estimate, in that order");
    }
    if !(-1.0..=1.0).contains(&corr) {
        return invalid(format!("correlation {corr} outside [-1, 1]"));
    }
    let c = match method {
        IntervalMethod::Bonferroni => norm_quantile(1.0 - alpha / 2.0),
        IntervalMethod::ImbensManski => imbens_manski_critical_value(
            upper_est.theta_hat - lower_est.theta_hat,
            lower_est.se.max(upper_est.se),
            alpha,
        )?,
    };
    let a = lower_est.theta_hat - c * lower_est.se;
    let b = upper_est.theta_hat + c * upper_est.se;
    Ok(IntervalEstimate { lower: a.min(b), upper: a.max(b), alpha, method, critical_value: c })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summand_arithmetic() {
        assert_eq!(ipw_value(3.0, 99.0, true, 0.5).unwrap(), 6.0);
        assert_eq!(ipw_value(99.0, -2.0, false, 0.5).unwrap(), -4.0);
        assert!(ipw_value(1.0, 1.0, true, 0.0).is_err());
        assert!(ipw_value(1.0, 1.0, true, 1.0).is_err());
        assert_eq!(aipw_value(3.0, 0.0, 0.0, 0.0, true, 0.5).unwrap(), 6.0);
        // Perfect outcome model: residual vanishes for any propensity.
        for p in [0.1, 0.5, 0.9] {
            assert!((aipw_value(2.0, 1.0, 2.0, 1.0, true, p).unwrap() - 3.0).abs() < 1e-15);
            assert!((aipw_value(2.0, 1.0, 2.0, 1.0, false, p).unwrap() - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_sided_examples() {
        let b = one_sided_bound(&[5.0; 10], 0.05, Side::Lower, None).unwrap();
        assert_eq!((b.theta_hat, b.confidence_bound, b.se), (5.0, 5.0, 0.0));
        assert!(b.degenerate_variance);
        let b = one_sided_bound(&[0.0, 2.0], 0.05, Side::Lower, None).unwrap();
        assert_eq!(b.theta_hat, 1.0);
        assert!((b.se - 1.0).abs() < 1e-15);
        assert!((b.confidence_bound - (1.0 - 1.6448536269514722)).abs() < 1e-12);
        let u = one_sided_bound(&[0.0, 2.0], 0.05, Side::Upper, None).unwrap();
        assert!((u.confidence_bound - (1.0 + 1.6448536269514722)).abs() < 1e-12);
        assert!(one_sided_bound(&[1.0], 0.05, Side::Lower, None).is_err());
    }

    #[test]
    fn clustered_constant_blocks() {
        // Two clusters of 5, internally constant at 0 and 2.
        let s: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 2.0 }).collect();
        let g: Vec<usize> = (0..10).map(|i| i / 5).collect();
        let iid = one_sided_bound(&s, 0.05, Side::Lower, None).unwrap();
        let cl = one_sided_bound(&s, 0.05, Side::Lower, Some(&g)).unwrap();
        // Cluster sums of deviations are -5 and 5: se = sqrt(2 * 50) / 10 = 1.
        assert!((cl.se - 1.0).abs() < 1e-12);
        assert!(cl.se > iid.se);
        assert!(one_sided_bound(&s, 0.05, Side::Lower, Some(&[0; 10])).is_err());
    }

    #[test]
    fn crossfit_pools() {
        let b = crossfit_bound(&[Some(1.0), Some(1.0), Some(3.0), Some(3.0)], 0.05, Side::Lower, None).unwrap();
        assert_eq!(b.theta_hat, 2.0);
        assert!(crossfit_bound(&[Some(1.0), None], 0.05, Side::Lower, None).is_err());
    }

    #[test]
    fn delta_method_reductions() {
        let beta = [1.0, 4.0, 2.0, 7.0, 3.0];
        let id = |v: &[f64]| Ok(v[0]);
        let g = |_: &[f64]| vec![1.0];
        let d = delta_method_bound(&beta, &[], &id, &g, 0.05, Side::Lower, None).unwrap();
        let o = one_sided_bound(&beta, 0.05, Side::Lower, None).unwrap();
        assert!((d.theta_hat - o.theta_hat).abs() < 1e-15 && (d.se - o.se).abs() < 1e-15);

        // Lee ratio with a constant denominator of 2.
        let beta = [4.0, 8.0, 5.0, 7.0];
        let two = [2.0; 4];
        let ratio = |v: &[f64]| Ok(v[0] / v[1]);
        let grad = |v: &[f64]| vec![1.0 / v[1], -v[0] / (v[1] * v[1])];
        let d = delta_method_bound(&beta, &[&two], &ratio, &grad, 0.05, Side::Lower, None).unwrap();
        let o = one_sided_bound(&beta, 0.05, Side::Lower, None).unwrap();
        assert!((d.theta_hat - 3.0).abs() < 1e-15);
        assert!((d.se - o.se / 2.0).abs() < 1e-12);

        let wrong = |v: &[f64]| vec![2.0 / v[1], -v[0] / (v[1] * v[1])];
        assert!(delta_method_bound(&beta, &[&two], &ratio, &wrong, 0.05, Side::Lower, None).is_err());
    }

    #[test]
    fn var_ite_with_equal_means() {
        let a = [1.0, 3.0, 2.0];
        let k = [0.5, 1.5, 1.0];
        let h = |v: &[f64]| Ok(v[0] - (v[1] - v[2]).powi(2));
        let g = |v: &[f64]| vec![1.0, -2.0 * (v[1] - v[2]), 2.0 * (v[1] - v[2])];
        let d = delta_method_bound(&a, &[&k, &k], &h, &g, 0.05, Side::Lower, None).unwrap();
        assert!((d.theta_hat - 2.0).abs() < 1e-15);
    }

    #[test]
    fn quasilinear_linear_crossing() {
        let r = quasilinear_bound((-3.0, 4.0), 1e-9, Side::Lower, |c| Ok(1.0 - c)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-8 && !r.grid_fallback);
        let r = quasilinear_bound((-3.0, 4.0), 1e-9, Side::Upper, |c| Ok(1.0 - c)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-8);
        let err = quasilinear_bound((-3.0, 0.0), 1e-9, Side::Lower, |c| Ok(1.0 - c)).unwrap_err();
        assert!(err.to_string().contains("no sign change"));
    }

    #[test]
    fn quasilinear_nonmonotone_uses_grid() {
        // A dip caught by the probe at 0.4 gives an early spurious crossing.
        let g = |c: f64| Ok(if (0.35..0.45).contains(&c) { -0.1 } else { 1.0 - c });
        let r = quasilinear_bound((0.0, 2.0), 1e-9, Side::Lower, g).unwrap();
        assert!(r.grid_fallback);
        assert!(r.value >= 0.35 && r.value < 0.45);
    }

    #[test]
    fn im_critical_value_limits() {
        let z95 = norm_quantile(0.95);
        let z975 = norm_quantile(0.975);
        assert!((imbens_manski_critical_value(1e6, 1.0, 0.05).unwrap() - z95).abs() < 1e-7);
        assert!((imbens_manski_critical_value(0.0, 1.0, 0.05).unwrap() - z975).abs() < 1e-7);
        let mk = |t, se, side| BoundEstimate {
            theta_hat: t,
            se,
            confidence_bound: t,
            alpha: 0.05,
            side,
            n_effective: 100,
            degenerate_variance: false,
        };
        for gap in [0.0, 0.05, 0.2, 1.0, 5.0] {
            let l = mk(0.0, 0.1, Side::Lower);
            let u = mk(gap, 0.1, Side::Upper);
            let b = two_sided_interval(&l, &u, 0.0, 0.05, IntervalMethod::Bonferroni).unwrap();
            let im = two_sided_interval(&l, &u, 0.0, 0.05, IntervalMethod::ImbensManski).unwrap();
            assert!(b.upper - b.lower >= im.upper - im.lower - 1e-9);
            assert!(im.lower <= im.upper);
        }
        assert!(two_sided_interval(&mk(0.0, 0.1, Side::Upper), &mk(1.0, 0.1, Side::Upper), 0.0, 0.05, IntervalMethod::Bonferroni).is_err());
    }
}
