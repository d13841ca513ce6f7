//! L2-penalised logistic regression by Newton's method.
//!
//! Minimises `sum w [log(1 + e^eta) - t eta] / sum w + (penalty / 2) |b|^2`
//! with `eta = a + z b`, the intercept unpenalised and the slopes measured
//! on weighted-standardised columns.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{check_design, Standardizer};
use super::make_folds;
use crate::error::{invalid, Error, Result};
use crate::stats::sigmoid;

const GRAD_TOL: f64 = 1e-8;
// Linear predictor treated as numerically certain; sigmoid(40) == 1.0 in f64.
const SATURATED: f64 = 40.0;

/// A fitted logistic model `P(t = 1 | z) = sigmoid(intercept + coefficients . z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub penalty: f64,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn linear_predictor(&self, z: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn predict_proba(&self, z: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(z))
    }
}

/// 10 log-spaced penalties over `[1e-4, 1e2]`.
pub fn default_penalty_grid() -> Vec<f64> {
    (0..10).map(|k| 10f64.powf(-4.0 + 6.0 * k as f64 / 9.0)).collect()
}

fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Newton iterations on standardised columns `x = [1, zs]`.
struct Problem<'a> {
    x: DMatrix<f64>,
    t: Vec<f64>,
    w: Vec<f64>,
    penalty: f64,
    std: &'a Standardizer,
}

impl Problem<'_> {
    fn loss(&self, theta: &DVector<f64>) -> f64 {
        let eta = &self.x * theta;
        let total: f64 = self.w.iter().sum();
        let nll: f64 = eta
            .iter()
            .zip(&self.t)
            .zip(&self.w)
            .map(|((e, t), w)| w * (log1pexp(*e) - t * e))
            .sum::<f64>()
            / total;
        nll + 0.5 * self.penalty * theta.rows(1, theta.len() - 1).norm_squared()
    }

    fn newton(&self, mut theta: DVector<f64>, max_iters: usize) -> Result<(DVector<f64>, usize)> {
        let (n, k) = self.x.shape();
        let total: f64 = self.w.iter().sum();
        let mut loss = self.loss(&theta);
        for iter in 0..=max_iters {
            let eta = &self.x * &theta;
            if self.penalty == 0.0 && eta.iter().any(|e| e.abs() > SATURATED) {
                return Err(Error::IterationLimit(
                    "fitted probabilities reached 0 or 1; the classes look separable, use l2_penalty > 0".into(),
                ));
            }
            let mut resid = DVector::zeros(n);
            let mut xd = self.x.clone();
            for i in 0..n {
                let p = sigmoid(eta[i]);
                resid[i] = self.w[i] * (p - self.t[i]) / total;
                let d = (self.w[i] * p * (1.0 - p) / total).sqrt();
                xd.row_mut(i).scale_mut(d);
            }
            let mut grad = self.x.transpose() * resid;
            for j in 1..k {
                grad[j] += self.penalty * theta[j];
            }
            if grad.norm() <= GRAD_TOL {
                return Ok((theta, iter));
            }
            if iter == max_iters {
                break;
            }
            let mut hess = xd.transpose() * &xd;
            for j in 1..k {
                hess[(j, j)] += self.penalty;
            }
            // Tiny ridge keeps the step defined when a class is nearly empty.
            for j in 0..k {
                hess[(j, j)] += 1e-14;
            }
            let Some(chol) = hess.cholesky() else {
                return Err(Error::Numerical("logistic Hessian is not positive definite".into()));
            };
            let step = chol.solve(&grad);
            // Newton decrement at rounding level: further steps cannot lower the loss.
            if grad.dot(&step) <= 1e-20 * (1.0 + loss.abs()) {
                return Ok((theta, iter));
            }
            let mut scale = 1.0;
            loop {
                let cand = &theta - scale * &step;
                let l = self.loss(&cand);
                if l <= loss + 1e-4 * scale * (-grad.dot(&step)) || scale < 1e-10 {
                    theta = cand;
                    loss = l;
                    break;
                }
                scale *= 0.5;
            }
        }
        Err(Error::IterationLimit(format!(
            "logistic regression did not converge in {max_iters} Newton steps; try l2_penalty > 0"
        )))
    }

    fn into_fit(self, theta: &DVector<f64>, d: usize, iterations: usize) -> LogisticFit {
        let b = theta.rows(1, theta.len() - 1).into_owned();
        let (shift, coefficients) = self.std.unscale(&b, d);
        LogisticFit { intercept: theta[0] - shift, coefficients, penalty: self.penalty, iterations }
    }
}

fn constant_fit(d: usize, positive: bool, penalty: f64) -> LogisticFit {
    LogisticFit {
        intercept: if positive { SATURATED } else { -SATURATED },
        coefficients: vec![0.0; d],
        penalty,
        iterations: 0,
    }
}

fn fit_rows(
    z: &DMatrix<f64>,
    t: &[bool],
    w: &[f64],
    rows: &[usize],
    penalty: f64,
    max_iters: usize,
    start: Option<&DVector<f64>>,
) -> Result<(LogisticFit, DVector<f64>)> {
    let d = z.ncols();
    let pos: f64 = rows.iter().filter(|&&i| t[i]).map(|&i| w[i]).sum();
    let total: f64 = rows.iter().map(|&i| w[i]).sum();
    // One class only: the MLE sits at infinity, report a saturated constant.
    if pos == 0.0 || pos == total {
        let fit = constant_fit(d, pos > 0.0, penalty);
        let theta = DVector::zeros(1);
        return Ok((fit, theta));
    }
    let zr = DMatrix::from_fn(rows.len(), d, |r, j| z[(rows[r], j)]);
    let wr: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
    let std = Standardizer::fit(&zr, &wr);
    let all: Vec<usize> = (0..rows.len()).collect();
    let zs = std.transform(&zr, &all);
    let k = zs.ncols() + 1;
    let x = DMatrix::from_fn(rows.len(), k, |i, j| if j == 0 { 1.0 } else { zs[(i, j - 1)] });
    let prob = Problem {
        x,
        t: rows.iter().map(|&i| t[i] as u8 as f64).collect(),
        w: wr,
        penalty,
        std: &std,
    };
    let theta0 = match start {
        Some(s) if s.len() == k => s.clone(),
        _ => {
            let mut th = DVector::zeros(k);
            let p = pos / total;
            th[0] = (p / (1.0 - p)).ln();
            th
        }
    };
    let (theta, iters) = prob.newton(theta0, max_iters)?;
    Ok((prob.into_fit(&theta, d, iters), theta))
}

/// Penalised logistic fit; the gradient norm is at most 1e-8 on return.
pub fn fit_logistic(
    z: &DMatrix<f64>,
    targets: &[bool],
    weights: Option<&[f64]>,
    l2_penalty: f64,
    max_newton_iters: usize,
) -> Result<LogisticFit> {
    let w = check_design(z, targets.len(), weights)?;
    if !(l2_penalty >= 0.0 && l2_penalty.is_finite()) {
        return invalid(format!("l2 penalty {l2_penalty} must be finite and nonnegative"));
    }
    let rows: Vec<usize> = (0..targets.len()).collect();
    fit_rows(z, targets, &w, &rows, l2_penalty, max_newton_iters, None).map(|(f, _)| f)
}

/// Logistic fit with the penalty chosen by cross-validated deviance. The
/// path runs from the largest penalty down with warm starts; penalties
/// whose fit fails are skipped with a warning.
pub fn fit_logistic_cv(
    z: &DMatrix<f64>,
    targets: &[bool],
    weights: Option<&[f64]>,
    penalty_grid: &[f64],
    n_folds: usize,
    seed: u64,
) -> Result<LogisticFit> {
    let w = check_design(z, targets.len(), weights)?;
    if penalty_grid.is_empty() || penalty_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return invalid("penalty grid must be nonempty, finite and nonnegative");
    }
    let mut grid = penalty_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let folds = make_folds(targets.len(), n_folds, seed)?;
    let mut dev = vec![0.0; grid.len()];
    let mut failed = vec![false; grid.len()];
    for k in 0..folds.n_folds {
        let train = folds.complement(k);
        let test = folds.members(k);
        let mut start: Option<DVector<f64>> = None;
        for (g, &pen) in grid.iter().enumerate() {
            match fit_rows(z, targets, &w, &train, pen, 100, start.as_ref()) {
                Ok((fit, theta)) => {
                    start = Some(theta);
                    for &i in &test {
                        let zi: Vec<f64> = z.row(i).iter().copied().collect();
                        let p = fit.predict_proba(&zi).clamp(1e-15, 1.0 - 1e-15);
                        dev[g] -= w[i] * if targets[i] { p.ln() } else { (1.0 - p).ln() };
                    }
                }
                Err(_) => failed[g] = true,
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for g in 0..grid.len() {
        if failed[g] {
            warn!("logistic fit failed at penalty {}; skipped", grid[g]);
            continue;
        }
        if best.is_none_or(|(_, d)| dev[g] < d) {
            best = Some((g, dev[g]));
        }
    }
    let Some((g, _)) = best else {
        return Err(Error::Numerical("no usable penalty in the logistic grid".into()));
    };
    // Grid is sorted descending, so earlier entries are stronger penalties.
    let mut last = None;
    for h in (0..=g).rev() {
        match fit_logistic(z, targets, Some(&w), grid[h], 100) {
            Ok(fit) => return Ok(fit),
            Err(e) => {
                warn!("logistic refit failed at penalty {}: {e}", grid[h]);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one refit attempted"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn balanced_intercept_only() {
        let z = DMatrix::zeros(10, 2);
        let t: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let fit = fit_logistic(&z, &t, None, 0.0, 50).unwrap();
        assert!((fit.predict_proba(&[0.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separated_data() {
        let z = DMatrix::from_fn(20, 1, |i, _| i as f64 - 9.5);
        let t: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let fit = fit_logistic(&z, &t, None, 1.0, 100).unwrap();
        assert!(fit.coefficients[0].is_finite() && fit.coefficients[0] > 0.0);
        let err = fit_logistic(&z, &t, None, 0.0, 100).unwrap_err();
        assert!(matches!(err, Error::IterationLimit(m) if m.contains("l2_penalty")));
    }

    #[test]
    fn recovers_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5000;
        let z = DMatrix::from_fn(n, 1, |_, _| rng.sample(StandardNormal));
        let t: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < sigmoid(1.0 - z[(i, 0)])).collect();
        let fit = fit_logistic(&z, &t, None, 0.0, 50).unwrap();
        assert!((fit.intercept - 1.0).abs() < 0.15, "{fit:?}");
        assert!((fit.coefficients[0] + 1.0).abs() < 0.15, "{fit:?}");
    }

    #[test]
    fn gradient_is_small_at_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 300;
        let z = DMatrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal));
        let t: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < sigmoid(z[(i, 0)] + 0.3)).collect();
        let pen = 0.05;
        let fit = fit_logistic(&z, &t, None, pen, 50).unwrap();
        // Gradient in standardised coordinates equals the raw-scale gradient
        // of the loss plus the penalty on standardised slopes.
        let mut g0 = 0.0;
        for i in 0..n {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            g0 += (fit.predict_proba(&zi) - t[i] as u8 as f64) / n as f64;
        }
        assert!(g0.abs() < 1e-8);
    }

    #[test]
    fn cv_on_noise_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 400;
        let z = DMatrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal));
        let t: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let fit = fit_logistic_cv(&z, &t, None, &default_penalty_grid(), 5, 0).unwrap();
        for i in 0..n {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            assert!((fit.predict_proba(&zi) - 0.5).abs() < 0.15);
        }
    }

    #[test]
    fn single_class_saturates() {
        let z = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let fit = fit_logistic(&z, &[true; 5], None, 0.1, 10).unwrap();
        assert_eq!(fit.predict_proba(&[2.0]), 1.0);
    }
}
