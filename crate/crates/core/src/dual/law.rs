use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A potential outcome: a scalar, or an outcome paired with a selection
/// indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutcomePoint {
    Scalar(f64),
    Compound { y: f64, s: bool },
}

impl OutcomePoint {
    pub fn y(&self) -> f64 {
        match *self {
            OutcomePoint::Scalar(y) | OutcomePoint::Compound { y, .. } => y,
        }
    }

    /// Selection indicator; `None` for scalar points.
    pub fn stratum(&self) -> Option<bool> {
        match *self {
            OutcomePoint::Scalar(_) => None,
            OutcomePoint::Compound { s, .. } => Some(s),
        }
    }

    /// Selection indicator as 0/1, treating scalar points as selected.
    pub fn s(&self) -> f64 {
        match self.stratum() {
            Some(false) => 0.0,
            _ => 1.0,
        }
    }

    /// Total order: by stratum, then by `y`.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        self.stratum()
            .cmp(&other.stratum())
            .then_with(|| self.y().total_cmp(&other.y()))
    }

    fn same_kind(&self, other: &Self) -> bool {
        self.stratum().is_some() == other.stratum().is_some()
    }
}

/// A finitely supported law with sorted, distinct support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw {
    support: Vec<OutcomePoint>,
    pmf: Vec<f64>,
}

const PMF_TOL: f64 = 1e-10;

impl DiscreteLaw {
    /// Sorts the support, merges duplicate points, drops zero-mass points and
    /// renormalises away rounding error.
    pub fn new(support: Vec<OutcomePoint>, pmf: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != pmf.len() {
            return invalid(format!(
                "law needs matching nonempty support and pmf (got {} and {})",
                support.len(),
                pmf.len()
            ));
        }
        if support.iter().any(|p| !p.y().is_finite()) {
            return invalid("law support has non-finite points");
        }
        if !support.iter().all(|p| p.same_kind(&support[0])) {
            return invalid("law support mixes scalar and compound points");
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("pmf has negative or non-finite mass");
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PMF_TOL {
            return invalid(format!("pmf sums to {total}, not 1"));
        }
        let mut pairs: Vec<(OutcomePoint, f64)> = support.into_iter().zip(pmf).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support: Vec<OutcomePoint> = Vec::with_capacity(pairs.len());
        let mut pmf: Vec<f64> = Vec::with_capacity(pairs.len());
        for (pt, m) in pairs {
            if m == 0.0 {
                continue;
            }
            match support.last() {
                Some(last) if last.total_cmp(&pt) == Ordering::Equal => {
                    *pmf.last_mut().expect("nonempty") += m;
                }
                _ => {
                    support.push(pt);
                    pmf.push(m);
                }
            }
        }
        let kept: f64 = pmf.iter().sum();
        pmf.iter_mut().for_each(|m| *m /= kept);
        Ok(Self { support, pmf })
    }

    /// Point mass.
    pub fn point(p: OutcomePoint) -> Self {
        Self {
            support: vec![p],
            pmf: vec![1.0],
        }
    }

    /// Joint law of `(Y, S)`: the unselected stratum is a single point at
    /// `y = 0` with mass `1 - p_selected`, the selected stratum places
    /// `p_selected / nvals` on each quantile of `Y | S = 1`.
    pub fn compound(p_selected: f64, y_quantile: &dyn Fn(f64) -> f64, nvals: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_selected) {
            return invalid(format!("selection probability {p_selected} outside [0, 1]"));
        }
        check_nvals(nvals)?;
        let mut support = vec![OutcomePoint::Compound { y: 0.0, s: false }];
        let mut pmf = vec![1.0 - p_selected];
        for j in 1..=nvals {
            let u = j as f64 / (nvals + 1) as f64;
            support.push(OutcomePoint::Compound {
                y: y_quantile(u),
                s: true,
            });
            pmf.push(p_selected / nvals as f64);
        }
        Self::new(support, pmf)
    }

    pub fn support(&self) -> &[OutcomePoint] {
        &self.support
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// `E[g(Y)]` under this law.
    pub fn expect(&self, g: impl Fn(&OutcomePoint) -> f64) -> f64 {
        self.support.iter().zip(&self.pmf).map(|(p, m)| m * g(p)).sum()
    }

    /// Mass of the selected stratum (1 for scalar laws).
    pub fn selected_mass(&self) -> f64 {
        self.expect(|p| p.s())
    }
}

fn check_nvals(nvals: usize) -> Result<()> {
    if nvals < 2 {
        return invalid(format!("nvals must be at least 2, got {nvals}"));
    }
    Ok(())
}

/// Discretise a law at its `j / (nvals + 1)` quantiles, `j = 1..=nvals`,
/// each with mass `1 / nvals`.
pub fn discretize_law(
    quantile_fn: &dyn Fn(f64) -> Result<OutcomePoint>,
    nvals: usize,
) -> Result<DiscreteLaw> {
    check_nvals(nvals)?;
    let mut support = Vec::with_capacity(nvals);
    for j in 1..=nvals {
        support.push(quantile_fn(j as f64 / (nvals + 1) as f64)?);
    }
    let scalar = support.iter().all(|p| p.stratum().is_none());
    if scalar && support.windows(2).any(|w| w[1].y() < w[0].y()) {
        return invalid("quantile function is not monotone");
    }
    DiscreteLaw::new(support, vec![1.0 / nvals as f64; nvals])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::norm_quantile;

    #[test]
    fn point_mass_collapses() {
        let law = discretize_law(&|_| Ok(OutcomePoint::Scalar(2.0)), 50).unwrap();
        assert_eq!(law.len(), 1);
        assert_eq!(law.pmf(), &[1.0]);
    }

    #[test]
    fn uniform_quantiles() {
        let law = discretize_law(&|u| Ok(OutcomePoint::Scalar(u)), 4).unwrap();
        let ys: Vec<f64> = law.support().iter().map(|p| p.y()).collect();
        for (a, b) in ys.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(law.pmf().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn normal_quantile_grid_moments() {
        let law = discretize_law(&|u| Ok(OutcomePoint::Scalar(norm_quantile(u))), 50).unwrap();
        let mean = law.expect(|p| p.y());
        let var = law.expect(|p| (p.y() - mean).powi(2));
        // The j/(n+1) grid truncates the tails: its variance is 0.8703 at n = 50.
        assert!(mean.abs() < 0.02);
        assert!((var - 0.870260535530991).abs() < 1e-9);
    }

    #[test]
    fn non_monotone_quantiles_are_rejected() {
        let err = discretize_law(&|u| Ok(OutcomePoint::Scalar(-u)), 5);
        assert!(err.is_err());
    }

    #[test]
    fn compound_law_masses() {
        let law = DiscreteLaw::compound(0.6, &|u| u, 3).unwrap();
        assert_eq!(law.len(), 4);
        assert!((law.pmf()[0] - 0.4).abs() < 1e-15);
        assert!((law.selected_mass() - 0.6).abs() < 1e-15);
        assert_eq!(law.support()[0].stratum(), Some(false));
    }

    #[test]
    fn duplicates_merge() {
        let s = vec![OutcomePoint::Scalar(1.0), OutcomePoint::Scalar(0.0), OutcomePoint::Scalar(1.0)];
        let law = DiscreteLaw::new(s, vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(law.len(), 2);
        assert_eq!(law.pmf(), &[0.5, 0.5]);
    }
}
