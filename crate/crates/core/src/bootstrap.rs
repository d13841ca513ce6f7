//! Gaussian multiplier bootstrap for choosing the tightest of `K`
//! candidate lower bounds, and the correlated-Gaussian variant for
//! cross-fitted generalized estimands.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimands::{GradFn, HFn};
use crate::estimators::{check_gradient, SummandTable};
use crate::stats::{mean, quantile_sorted, sample_var};

pub const DEFAULT_N_DRAWS: usize = 4000;
pub const MIN_N_DRAWS: usize = 1000;
/// Largest number of candidate models for the split-sample bootstrap.
pub const MAX_MODELS: usize = 10_000;
/// Largest number of candidate models for the cross-fit variant.
pub const MAX_CROSSFIT_MODELS: usize = 100;

/// Draws per counter-based substream.
const CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbResult {
    pub q_hat: f64,
    /// Zero-based index of the model attaining the bound.
    pub selected_k: usize,
    pub lcb: f64,
    /// `(theta_hat_k, sigma_hat_k)` with `sigma_hat_k` the per-observation SD.
    pub per_model: Vec<(f64, f64)>,
    pub n_draws: usize,
    pub seed: u64,
}

fn check_args(alpha: f64, n_draws: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha {alpha} outside (0, 1)"));
    }
    if n_draws < MIN_N_DRAWS {
        return invalid(format!("n_draws {n_draws} is below the minimum of {MIN_N_DRAWS}"));
    }
    Ok(())
}

/// Run `n_draws` draws split into chunks; chunk `c` uses ChaCha stream `c`
/// of `seed`, so the result does not depend on how chunks are scheduled.
fn draw_statistics(n_draws: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> f64 + Sync) -> Vec<f64> {
    let n_chunks = n_draws.div_ceil(CHUNK);
    let chunk = |c: usize| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let len = CHUNK.min(n_draws - c * CHUNK);
        (0..len).map(|_| draw(&mut rng)).collect()
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<f64>> = (0..n_chunks).map(chunk).collect();
    let mut stats: Vec<f64> = parts.into_iter().flatten().collect();
    stats.sort_by(|a, b| a.total_cmp(b));
    stats
}

/// Column means, SDs and standardized deviations `(S_ik - theta_k) / sigma_k`.
fn standardize(columns: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut thetas = Vec::with_capacity(columns.len());
    let mut sigmas = Vec::with_capacity(columns.len());
    let mut z = Vec::with_capacity(columns.len());
    for (k, col) in columns.iter().enumerate() {
        let m = mean(col);
        let s = sample_var(col).sqrt();
        if !(s > 0.0) {
            return invalid(format!("summand column {k} has zero variance"));
        }
        z.push(col.iter().map(|v| (v - m) / s).collect());
        thetas.push(m);
        sigmas.push(s);
    }
    Ok((thetas, sigmas, z))
}

fn sorted_statistics(table: &SummandTable, n_draws: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    table.validate()?;
    if table.k() > MAX_MODELS {
        return invalid(format!("{} candidate models exceed the cap of {MAX_MODELS}", table.k()));
    }
    let n = table.n();
    if n < 2 {
        return invalid("the multiplier bootstrap needs at least 2 observations");
    }
    let (thetas, sigmas, z) = standardize(&table.columns)?;
    let scale = 1.0 / (n as f64).sqrt();
    let stats = draw_statistics(n_draws, seed, |rng| {
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        z.iter()
            .map(|col| col.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * scale)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok((stats, thetas, sigmas))
}

/// `(1 - alpha)` quantile of `max_k sigma_k^-1 n^-1/2 sum_i W_i (S_ik - theta_k)`.
pub fn multiplier_bootstrap_quantile(table: &SummandTable, alpha: f64, n_draws: usize, seed: u64) -> Result<f64> {
    check_args(alpha, n_draws)?;
    let (stats, _, _) = sorted_statistics(table, n_draws, seed)?;
    Ok(quantile_sorted(&stats, 1.0 - alpha))
}

fn select(q_hat: f64, thetas: &[f64], sigmas: &[f64], n: usize, n_draws: usize, seed: u64) -> MbResult {
    let root_n = (n as f64).sqrt();
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, (t, s)) in thetas.iter().zip(sigmas).enumerate() {
        let lcb = t - q_hat * s / root_n;
        if lcb > best.1 {
            best = (k, lcb);
        }
    }
    MbResult {
        q_hat,
        selected_k: best.0,
        lcb: best.1,
        per_model: thetas.iter().copied().zip(sigmas.iter().copied()).collect(),
        n_draws,
        seed,
    }
}

/// `max_k (theta_k - q_hat sigma_k / sqrt(n))`; ties go to the smallest `k`.
pub fn mb_select_lcb(table: &SummandTable, alpha: f64, n_draws: usize, seed: u64) -> Result<MbResult> {
    check_args(alpha, n_draws)?;
    let (stats, thetas, sigmas) = sorted_statistics(table, n_draws, seed)?;
    let q_hat = quantile_sorted(&stats, 1.0 - alpha);
    Ok(select(q_hat, &thetas, &sigmas, table.n(), n_draws, seed))
}

/// Lower Cholesky factor, with diagonal jitter escalated from `1e-10` by
/// factors of ten up to `1e-6`.
pub fn jittered_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-6 * (1.0 + 1e-9) {
        let shifted = m + DMatrix::<f64>::identity(m.nrows(), m.ncols()) * jitter;
        if let Some(c) = shifted.cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical("correlation matrix is not positive semidefinite even after jitter 1e-6".into()))
}

/// Bootstrap selection for cross-fitted generalized estimands
/// `h_k(E[beta_k], E[kappa])`. All models share the identified-moment
/// columns `kappa_columns`. The critical value is the `(1 - alpha)`
/// quantile of the maximum of a Gaussian vector with the correlation of
/// the delta-method influence values.
pub fn crossfit_generalized_mb(
    beta_columns: &[Vec<f64>],
    kappa_columns: &[Vec<f64>],
    h: &[HFn],
    grad_h: &[GradFn],
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<MbResult> {
    check_args(alpha, n_draws)?;
    let k = beta_columns.len();
    if k == 0 {
        return invalid("no candidate models");
    }
    if k > MAX_CROSSFIT_MODELS {
        return invalid(format!("{k} candidate models exceed the cross-fit cap of {MAX_CROSSFIT_MODELS}"));
    }
    if h.len() != k || grad_h.len() != k {
        return invalid("one h and one gradient are needed per model");
    }
    let n = beta_columns[0].len();
    if n < 2 || beta_columns.iter().chain(kappa_columns).any(|c| c.len() != n) {
        return invalid("summand columns must share a length of at least 2");
    }
    let kappa_means: Vec<f64> = kappa_columns.iter().map(|c| mean(c)).collect();
    let mut thetas = Vec::with_capacity(k);
    let mut influence = Vec::with_capacity(k);
    for j in 0..k {
        let mut args = vec![mean(&beta_columns[j])];
        args.extend(&kappa_means);
        thetas.push(h[j](&args)?);
        let g = grad_h[j](&args);
        check_gradient(h[j].as_ref(), &g, &args, 1e-4)?;
        let cols: Vec<&Vec<f64>> = std::iter::once(&beta_columns[j]).chain(kappa_columns).collect();
        let psi: Vec<f64> = (0..n)
            .map(|i| cols.iter().zip(&g).zip(&args).map(|((c, gj), m)| gj * (c[i] - m)).sum())
            .collect();
        influence.push(psi);
    }
    let (_, sigmas, z) = standardize(&influence)?;
    let corr = DMatrix::from_fn(k, k, |a, b| {
        z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / (n as f64 - 1.0)
    });
    let l = jittered_cholesky(&corr)?;
    let stats = draw_statistics(n_draws, seed, |rng| {
        let e: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        (0..k)
            .map(|a| (0..=a).map(|b| l[(a, b)] * e[b]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let q_hat = quantile_sorted(&stats, 1.0 - alpha);
    Ok(select(q_hat, &thetas, &sigmas, n, n_draws, seed))
}
